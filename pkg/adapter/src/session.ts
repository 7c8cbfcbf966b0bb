/**
 * Per-connection protocol state machine, socket-free so the exact byte
 * streams can be generated and tested without I/O.
 */
import { EnvOutput, EpisodeAccounting } from "./env.js";
import {
  ERR_INVALID_ACTION,
  ERR_PROTOCOL,
  PROTOCOL_VERSION,
  ProtocolError,
  WireMessage,
  decodeFrame,
  encodeFrame,
  f32Array,
} from "./wire.js";

export interface SessionReply {
  data: Buffer | null;
  close: boolean;
}

export class Session {
  private closed = false;

  constructor(private readonly env: EpisodeAccounting) {}

  private stepFrame(out: EnvOutput): Buffer {
    return encodeFrame({
      type: "step",
      observation: f32Array(out.observation, this.env.spec.obsDims),
      reward: out.reward,
      done: out.done,
      episodeStep: out.episodeStep,
      episodeReturn: out.episodeReturn,
    });
  }

  /** HELLO plus the initial STEP (done=true episode boundary marker). */
  start(): Buffer {
    const hello = encodeFrame({
      type: "hello",
      protocolVersion: PROTOCOL_VERSION,
      obsDtype: 2,
      obsDims: this.env.spec.obsDims,
      numActions: this.env.spec.numActions,
    });
    return Buffer.concat([hello, this.stepFrame(this.env.initial())]);
  }

  /** One complete inbound frame's bytes → reply bytes (or close). */
  handleFrame(frame: Buffer): SessionReply {
    if (this.closed) return { data: null, close: true };
    let msg: WireMessage;
    try {
      msg = decodeFrame(frame);
    } catch (err) {
      this.closed = true;
      const message = err instanceof ProtocolError ? err.message : String(err);
      return { data: encodeFrame({ type: "error", code: ERR_PROTOCOL, message }), close: true };
    }
    if (msg.type === "bye") {
      this.closed = true;
      return { data: null, close: true };
    }
    if (msg.type !== "action") {
      this.closed = true;
      return {
        data: encodeFrame({
          type: "error",
          code: ERR_PROTOCOL,
          message: `expected ACTION, got ${msg.type.toUpperCase()}`,
        }),
        close: true,
      };
    }
    if (!(msg.value >= 0 && msg.value < this.env.spec.numActions)) {
      this.closed = true;
      return {
        data: encodeFrame({
          type: "error",
          code: ERR_INVALID_ACTION,
          message: `action ${msg.value} outside [0, ${this.env.spec.numActions})`,
        }),
        close: true,
      };
    }
    return { data: this.stepFrame(this.env.step(msg.value)), close: false };
  }
}
