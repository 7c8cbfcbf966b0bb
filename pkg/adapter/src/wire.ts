/**
 * Frame codec for the environment streaming protocol.
 *
 * Frame layout: u32 little-endian payload length (counting the type byte),
 * one type byte, then the payload. Arrays travel as dtype code (0=u8,
 * 1=i64, 2=f32), ndim (u8), u32 dims, then raw little-endian row-major
 * data. Byte output must match the trainer's implementation exactly; the
 * golden fixtures under ../fixtures/wire pin it.
 */

export const MSG_HELLO = 0x01;
export const MSG_STEP = 0x02;
export const MSG_ACTION = 0x03;
export const MSG_BYE = 0x04;
export const MSG_ERROR = 0x05;

export const ERR_INVALID_ACTION = 1;
export const ERR_PROTOCOL = 2;
export const ERR_CAPACITY = 3;

export const PROTOCOL_VERSION = 1;
export const MAX_FRAME_BYTES = 64 * 1024 * 1024;

export type DtypeCode = 0 | 1 | 2; // u8, i64, f32
const DTYPE_SIZES: Record<DtypeCode, number> = { 0: 1, 1: 8, 2: 4 };

export class ProtocolError extends Error {}

export interface Hello {
  type: "hello";
  protocolVersion: number;
  obsDtype: DtypeCode;
  obsDims: number[];
  numActions: number;
}

export interface WireArray {
  dtype: DtypeCode;
  dims: number[];
  /** raw little-endian element data */
  data: Buffer;
}

export interface Step {
  type: "step";
  observation: WireArray;
  reward: number;
  done: boolean;
  episodeStep: number;
  episodeReturn: number;
}

export interface Action {
  type: "action";
  value: number;
}

export interface Bye {
  type: "bye";
}

export interface WireError {
  type: "error";
  code: number;
  message: string;
}

export type WireMessage = Hello | Step | Action | Bye | WireError;

export function f32Array(values: ArrayLike<number>, dims: number[]): WireArray {
  const data = Buffer.allocUnsafe(4 * values.length);
  for (let i = 0; i < values.length; i++) {
    data.writeFloatLE(values[i], 4 * i);
  }
  return { dtype: 2, dims, data };
}

function encodeArray(arr: WireArray): Buffer {
  const header = Buffer.allocUnsafe(2 + 4 * arr.dims.length);
  header.writeUInt8(arr.dtype, 0);
  header.writeUInt8(arr.dims.length, 1);
  arr.dims.forEach((d, i) => header.writeUInt32LE(d, 2 + 4 * i));
  return Buffer.concat([header, arr.data]);
}

function decodeArray(payload: Buffer, offset: number): [WireArray, number] {
  if (payload.length - offset < 2) throw new ProtocolError("truncated array header");
  const dtype = payload.readUInt8(offset);
  const ndim = payload.readUInt8(offset + 1);
  if (dtype !== 0 && dtype !== 1 && dtype !== 2) {
    throw new ProtocolError(`unknown dtype code ${dtype}`);
  }
  offset += 2;
  if (payload.length - offset < 4 * ndim) throw new ProtocolError("truncated array dims");
  const dims: number[] = [];
  for (let i = 0; i < ndim; i++) {
    dims.push(payload.readUInt32LE(offset + 4 * i));
  }
  offset += 4 * ndim;
  const count = dims.reduce((a, b) => a * b, 1);
  const nbytes = count * DTYPE_SIZES[dtype as DtypeCode];
  if (nbytes > MAX_FRAME_BYTES) throw new ProtocolError("array exceeds frame limit");
  if (payload.length - offset < nbytes) throw new ProtocolError("truncated array data");
  return [
    { dtype: dtype as DtypeCode, dims, data: payload.subarray(offset, offset + nbytes) },
    offset + nbytes,
  ];
}

function frame(msgType: number, payload: Buffer): Buffer {
  const length = 1 + payload.length;
  if (length > MAX_FRAME_BYTES) throw new ProtocolError(`frame of ${length} bytes exceeds limit`);
  const head = Buffer.allocUnsafe(5);
  head.writeUInt32LE(length, 0);
  head.writeUInt8(msgType, 4);
  return Buffer.concat([head, payload]);
}

export function encodeFrame(msg: WireMessage): Buffer {
  switch (msg.type) {
    case "hello": {
      if (msg.numActions < 1) throw new ProtocolError("numActions must be >= 1");
      const payload = Buffer.allocUnsafe(4 + 1 + 1 + 4 * msg.obsDims.length + 4);
      payload.writeUInt32LE(msg.protocolVersion, 0);
      payload.writeUInt8(msg.obsDtype, 4);
      payload.writeUInt8(msg.obsDims.length, 5);
      msg.obsDims.forEach((d, i) => payload.writeUInt32LE(d, 6 + 4 * i));
      payload.writeUInt32LE(msg.numActions, 6 + 4 * msg.obsDims.length);
      return frame(MSG_HELLO, payload);
    }
    case "step": {
      const obs = encodeArray(msg.observation);
      const trailer = Buffer.allocUnsafe(17);
      trailer.writeFloatLE(msg.reward, 0);
      trailer.writeUInt8(msg.done ? 1 : 0, 4);
      trailer.writeBigInt64LE(BigInt(msg.episodeStep), 5);
      trailer.writeFloatLE(msg.episodeReturn, 13);
      return frame(MSG_STEP, Buffer.concat([obs, trailer]));
    }
    case "action": {
      // scalar i64 array: dtype 1, ndim 0, 8 data bytes
      const payload = Buffer.allocUnsafe(10);
      payload.writeUInt8(1, 0);
      payload.writeUInt8(0, 1);
      payload.writeBigInt64LE(BigInt(msg.value), 2);
      return frame(MSG_ACTION, payload);
    }
    case "bye":
      return frame(MSG_BYE, Buffer.alloc(0));
    case "error": {
      const text = Buffer.from(msg.message, "utf-8");
      const payload = Buffer.allocUnsafe(4 + text.length);
      payload.writeUInt32LE(msg.code, 0);
      text.copy(payload, 4);
      return frame(MSG_ERROR, payload);
    }
  }
}

/** Strict inverse of encodeFrame over exactly one complete frame. */
export function decodeFrame(buf: Buffer): WireMessage {
  if (buf.length < 5) throw new ProtocolError(`frame too short: ${buf.length} bytes`);
  const length = buf.readUInt32LE(0);
  if (length > MAX_FRAME_BYTES) throw new ProtocolError(`declared length ${length} exceeds limit`);
  if (buf.length !== 4 + length) {
    throw new ProtocolError(`declared payload length ${length}, frame carries ${buf.length - 4}`);
  }
  const msgType = buf.readUInt8(4);
  const payload = buf.subarray(5);
  switch (msgType) {
    case MSG_HELLO: {
      if (payload.length < 6) throw new ProtocolError("truncated HELLO");
      const protocolVersion = payload.readUInt32LE(0);
      const obsDtype = payload.readUInt8(4);
      const ndim = payload.readUInt8(5);
      if (obsDtype !== 0 && obsDtype !== 1 && obsDtype !== 2) {
        throw new ProtocolError(`unknown dtype code ${obsDtype}`);
      }
      if (payload.length !== 6 + 4 * ndim + 4) throw new ProtocolError("bad HELLO size");
      const obsDims: number[] = [];
      for (let i = 0; i < ndim; i++) obsDims.push(payload.readUInt32LE(6 + 4 * i));
      const numActions = payload.readUInt32LE(6 + 4 * ndim);
      if (numActions < 1) throw new ProtocolError("numActions must be >= 1");
      return { type: "hello", protocolVersion, obsDtype: obsDtype as DtypeCode, obsDims, numActions };
    }
    case MSG_STEP: {
      const [observation, offset] = decodeArray(payload, 0);
      if (payload.length - offset !== 17) throw new ProtocolError("STEP trailer has wrong size");
      const reward = payload.readFloatLE(offset);
      const doneByte = payload.readUInt8(offset + 4);
      if (doneByte !== 0 && doneByte !== 1) {
        throw new ProtocolError(`done byte must be 0 or 1, got ${doneByte}`);
      }
      const episodeStep = Number(payload.readBigInt64LE(offset + 5));
      const episodeReturn = payload.readFloatLE(offset + 13);
      return { type: "step", observation, reward, done: doneByte === 1, episodeStep, episodeReturn };
    }
    case MSG_ACTION: {
      const [arr, offset] = decodeArray(payload, 0);
      if (offset !== payload.length) throw new ProtocolError("trailing bytes in ACTION");
      if (arr.dtype !== 1 || arr.dims.length !== 0) {
        throw new ProtocolError("ACTION must be a scalar i64");
      }
      return { type: "action", value: Number(arr.data.readBigInt64LE(0)) };
    }
    case MSG_BYE:
      if (payload.length !== 0) throw new ProtocolError("BYE carries no payload");
      return { type: "bye" };
    case MSG_ERROR: {
      if (payload.length < 4) throw new ProtocolError("truncated ERROR");
      return { type: "error", code: payload.readUInt32LE(0), message: payload.subarray(4).toString("utf-8") };
    }
    default:
      throw new ProtocolError(`unknown msg_type 0x${msgType.toString(16).toUpperCase()}`);
  }
}

/** Accumulates stream chunks and splits out complete frames. */
export class FrameSplitter {
  private buf: Buffer = Buffer.alloc(0);

  push(chunk: Buffer): Buffer[] {
    this.buf = this.buf.length === 0 ? chunk : Buffer.concat([this.buf, chunk]);
    const frames: Buffer[] = [];
    for (;;) {
      if (this.buf.length < 4) break;
      const length = this.buf.readUInt32LE(0);
      if (length > MAX_FRAME_BYTES) throw new ProtocolError(`declared length ${length} exceeds limit`);
      if (this.buf.length < 4 + length) break;
      frames.push(this.buf.subarray(0, 4 + length));
      this.buf = this.buf.subarray(4 + length);
    }
    return frames;
  }
}
