/**
 * TCP environment server: one fresh environment instance per connection,
 * connection cap enforced with an ERROR frame, sessions fully isolated.
 *
 * The runtime has no interpreter lock, so connections share one event loop
 * with per-connection state instead of one worker process each; isolation
 * semantics are identical.
 */
import * as net from "node:net";
import { EpisodeAccounting, GymEnv } from "./env.js";
import { Session } from "./session.js";
import { ERR_CAPACITY, ERR_PROTOCOL, FrameSplitter, encodeFrame } from "./wire.js";

export interface ServeOptions {
  host: string;
  port: number;
  maxConnections: number;
  envFactory: () => GymEnv;
}

export interface RunningServer {
  host: string;
  port: number;
  connectionsServed: number;
  close(): Promise<void>;
}

export function serveGym(options: ServeOptions): Promise<RunningServer> {
  let active = 0;
  const sockets = new Set<net.Socket>();
  const running = { connectionsServed: 0 };

  const server = net.createServer((socket) => {
    socket.setNoDelay(true);
    if (active >= options.maxConnections) {
      socket.write(
        encodeFrame({ type: "error", code: ERR_CAPACITY, message: "server at connection limit" }),
      );
      socket.end();
      return;
    }
    active += 1;
    running.connectionsServed += 1;
    sockets.add(socket);

    const session = new Session(new EpisodeAccounting(options.envFactory()));
    const splitter = new FrameSplitter();
    socket.write(session.start());

    socket.on("data", (chunk) => {
      let frames: Buffer[];
      try {
        frames = splitter.push(chunk);
      } catch (err) {
        socket.write(
          encodeFrame({ type: "error", code: ERR_PROTOCOL, message: String(err) }),
        );
        socket.end();
        return;
      }
      for (const frame of frames) {
        const reply = session.handleFrame(frame);
        if (reply.data !== null) socket.write(reply.data);
        if (reply.close) {
          socket.end();
          return;
        }
      }
    });
    const release = () => {
      if (sockets.delete(socket)) active -= 1;
    };
    socket.on("close", release);
    socket.on("error", () => {
      release();
      socket.destroy();
    });
  });

  return new Promise((resolve, reject) => {
    server.once("error", reject);
    server.listen(options.port, options.host, () => {
      const addr = server.address() as net.AddressInfo;
      resolve({
        host: addr.address,
        port: addr.port,
        get connectionsServed() {
          return running.connectionsServed;
        },
        close: () =>
          new Promise<void>((done) => {
            for (const socket of sockets) {
              socket.write(encodeFrame({ type: "bye" }));
              socket.end();
            }
            server.close(() => done());
          }),
      });
    });
  });
}
