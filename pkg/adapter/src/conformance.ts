/**
 * Conformance vectors: byte transcripts of scripted sessions, used to pin
 * protocol equivalence against the trainer's committed golden fixtures.
 */
import { BanditEnv, EpisodeAccounting, GymEnv } from "./env.js";
import { Session } from "./session.js";
import { encodeFrame } from "./wire.js";

export interface Transcript {
  /** server-to-client bytes: HELLO, initial STEP, then one STEP per action */
  s2c: Buffer;
  /** client-to-server bytes: one ACTION per script entry, then BYE */
  c2s: Buffer;
}

export function conformanceVectors(
  script: number[],
  envFactory: () => GymEnv = () => new BanditEnv(),
): Transcript {
  const session = new Session(new EpisodeAccounting(envFactory()));
  const s2c: Buffer[] = [session.start()];
  const c2s: Buffer[] = [];
  for (const action of script) {
    const frame = encodeFrame({ type: "action", value: action });
    c2s.push(frame);
    const reply = session.handleFrame(frame);
    if (reply.data !== null) s2c.push(reply.data);
    if (reply.close) break;
  }
  c2s.push(encodeFrame({ type: "bye" }));
  return { s2c: Buffer.concat(s2c), c2s: Buffer.concat(c2s) };
}
