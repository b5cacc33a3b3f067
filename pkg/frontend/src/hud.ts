// HUD read-outs and the relit-mode light gizmo. The gizmo is a disc: a grab
// point inside it maps to a unit light direction pointing into the screen,
// with points past the rim clamped back onto it.

import type { ConnectionStatus } from "./state.js";
import type { Vec3 } from "./protocol.js";

export type StatusLevel = "ok" | "busy" | "error";

export interface StatusLine {
  level: StatusLevel;
  text: string;
}

export function connectionStatus(status: ConnectionStatus): StatusLine {
  switch (status) {
    case "open":
      return { level: "ok", text: "connected" };
    case "connecting":
      return { level: "busy", text: "connecting" };
    case "closed":
      return { level: "busy", text: "disconnected, retrying" };
    case "error":
      return { level: "error", text: "connection error" };
  }
}

/** Server-reported problem with the last pose; shown red, frame kept. */
export function errorStatus(text: string): StatusLine {
  return { level: "error", text };
}

export function formatMillis(ms: number | null): string {
  return ms === null ? "--" : `${ms.toFixed(1)} ms`;
}

export function formatMicros(micros: number): string {
  if (micros < 1000) {
    return `${Math.round(micros)} us`;
  }
  if (micros < 1e6) {
    return `${(micros / 1000).toFixed(1)} ms`;
  }
  return `${(micros / 1e6).toFixed(2)} s`;
}

const RIM = 0.999;

/** Disc coordinates in [-1, 1] to a unit light direction (negative z points
    into the screen, toward the scene). */
export function lightFromGizmo(gx: number, gy: number): Vec3 {
  const r = Math.hypot(gx, gy);
  if (r > RIM) {
    gx *= RIM / r;
    gy *= RIM / r;
  }
  const z = -Math.sqrt(Math.max(0, 1 - gx * gx - gy * gy));
  const norm = Math.hypot(gx, gy, z);
  return [gx / norm, gy / norm, z / norm];
}

/** Inverse of lightFromGizmo for drawing the grab point. */
export function gizmoFromLight(dir: Vec3): [number, number] {
  return [dir[0], dir[1]];
}
