// Wire protocol for the render service: poses go out as JSON text frames,
// rendered frames come back as a 33-byte binary header plus row-major RGBA8.
// Validation mirrors the server's parser so both ends accept and reject the
// same messages; the recordings under fixtures/ pin the two to one reading.

export const FRAME_MAGIC = "FRM1";
export const FRAME_HEADER_BYTES = 33;
export const SIZE_RANGE: readonly [number, number] = [64, 4096];
export const SEQUENCE_LIMIT = 2 ** 32;

export const MODE_CODES = { rgb: 0, normal: 1, relit: 2 } as const;
export type Mode = keyof typeof MODE_CODES;
const MODE_NAMES: readonly Mode[] = ["rgb", "normal", "relit"];

export type Vec3 = [number, number, number];
export type Quaternion = [number, number, number, number];

export interface PoseMessage {
  quaternion: Quaternion; // camera rotation, wxyz order
  translation: Vec3;
  fx: number;
  fy: number;
  width: number;
  height: number;
  mode: Mode;
  light_dir: Vec3 | null;
  sequence: number;
}

export interface FrameMessage {
  sequence: number;
  width: number;
  height: number;
  mode: Mode;
  render_micros: number;
  preprocess_micros: number;
  rgba: Uint8Array<ArrayBuffer>; // height * width * 4, row-major
}

export class PoseFormatError extends Error {}

function isNumber(value: unknown): value is number {
  return typeof value === "number" && Number.isFinite(value);
}

function numbers(obj: Record<string, unknown>, key: string, count: number): number[] {
  const values = obj[key];
  if (!Array.isArray(values) || values.length !== count || !values.every(isNumber)) {
    throw new PoseFormatError(`'${key}' must be a list of ${count} numbers`);
  }
  return values as number[];
}

function unit(values: number[], name: string, tolerance: number): number[] {
  const norm = Math.sqrt(values.reduce((acc, v) => acc + v * v, 0));
  if (Math.abs(norm - 1) > tolerance) {
    throw new PoseFormatError(
      `${name} must be unit length within ${tolerance}, got norm ${norm.toFixed(6)}`);
  }
  return values.map((v) => v / norm);
}

/** Validate a decoded JSON value against the pose schema. */
export function parsePose(value: unknown, requireSequence = true): PoseMessage {
  if (typeof value !== "object" || value === null || Array.isArray(value)) {
    throw new PoseFormatError("pose must be a JSON object");
  }
  const obj = value as Record<string, unknown>;
  const quaternion = unit(numbers(obj, "quaternion", 4), "quaternion", 1e-3);
  const translation = numbers(obj, "translation", 3);
  const intrinsics: number[] = [];
  for (const key of ["fx", "fy"]) {
    const v = obj[key];
    if (!isNumber(v) || v <= 0) {
      throw new PoseFormatError(`'${key}' must be a positive number`);
    }
    intrinsics.push(v);
  }
  const sizes: number[] = [];
  for (const key of ["width", "height"]) {
    const v = obj[key];
    if (!isNumber(v) || !Number.isInteger(v) || v < SIZE_RANGE[0] || v > SIZE_RANGE[1]) {
      throw new PoseFormatError(
        `'${key}' must be an integer in [${SIZE_RANGE[0]}, ${SIZE_RANGE[1]}]`);
    }
    sizes.push(v);
  }
  const mode = "mode" in obj ? obj.mode : "rgb";
  if (typeof mode !== "string" || !(mode in MODE_CODES)) {
    throw new PoseFormatError(
      `unknown mode '${mode}'; expected one of ('rgb', 'normal', 'relit')`);
  }
  let lightDir: number[] | null = null;
  if (obj.light_dir != null) {
    lightDir = unit(numbers(obj, "light_dir", 3), "light_dir", 1e-3);
  }
  const sequence = "sequence" in obj ? obj.sequence : requireSequence ? undefined : 0;
  if (!isNumber(sequence) || !Number.isInteger(sequence)
      || sequence < 0 || sequence >= SEQUENCE_LIMIT) {
    throw new PoseFormatError("'sequence' must be a non-negative integer below 2**32");
  }
  return {
    quaternion: quaternion as Quaternion,
    translation: translation as Vec3,
    fx: intrinsics[0]!,
    fy: intrinsics[1]!,
    width: sizes[0]!,
    height: sizes[1]!,
    mode: mode as Mode,
    light_dir: lightDir as Vec3 | null,
    sequence,
  };
}

/** Stable field order; light_dir is omitted when unset, as the server treats
    null and absent the same. */
export function serializePose(pose: PoseMessage): string {
  const body: Record<string, unknown> = {
    quaternion: pose.quaternion,
    translation: pose.translation,
    fx: pose.fx,
    fy: pose.fy,
    width: pose.width,
    height: pose.height,
    mode: pose.mode,
    sequence: pose.sequence,
  };
  if (pose.light_dir !== null) {
    body.light_dir = pose.light_dir;
  }
  return JSON.stringify(body);
}

/** Parse a binary frame. Header layout: 4s magic, u32 sequence, u32 width,
    u32 height, u8 mode code, u64 render micros, u64 preprocess micros, all
    little-endian, then the RGBA8 payload. */
export function decodeFrame(data: ArrayBuffer): FrameMessage {
  if (data.byteLength < FRAME_HEADER_BYTES) {
    throw new Error(`frame too short: ${data.byteLength} bytes`);
  }
  const view = new DataView(data);
  let magic = "";
  for (let i = 0; i < 4; i += 1) {
    magic += String.fromCharCode(view.getUint8(i));
  }
  if (magic !== FRAME_MAGIC) {
    throw new Error(`bad frame magic '${magic}'`);
  }
  const sequence = view.getUint32(4, true);
  const width = view.getUint32(8, true);
  const height = view.getUint32(12, true);
  const modeCode = view.getUint8(16);
  const mode = MODE_NAMES[modeCode];
  if (mode === undefined) {
    throw new Error(`unknown mode code ${modeCode}`);
  }
  // Timings fit in double precision for any realistic duration.
  const renderMicros = Number(view.getBigUint64(17, true));
  const preprocessMicros = Number(view.getBigUint64(25, true));
  const expected = FRAME_HEADER_BYTES + width * height * 4;
  if (data.byteLength !== expected) {
    throw new Error(`expected ${expected} bytes, got ${data.byteLength}`);
  }
  return {
    sequence,
    width,
    height,
    mode,
    render_micros: renderMicros,
    preprocess_micros: preprocessMicros,
    rgba: new Uint8Array(data, FRAME_HEADER_BYTES),
  };
}
