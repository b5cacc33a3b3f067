// Session state for the viewer: the pose the user is steering, a dirty flag
// that coalesces any number of input events into one message per animation
// tick (pairing with the server's latest-wins mailbox), and the sequence
// bookkeeping that turns echoed frames into round-trip times.

import { clampOrbit, poseFromOrbit } from "./orbit.js";
import type { OrbitState, ViewSize } from "./orbit.js";
import type { Mode, PoseMessage, Vec3 } from "./protocol.js";
import { SEQUENCE_LIMIT } from "./protocol.js";

export type ConnectionStatus = "connecting" | "open" | "closed" | "error";

// Sends awaiting an echo; anything older when an echo lands was coalesced
// away by the server and will never answer.
const INFLIGHT_CAP = 64;

export class ViewerState {
  orbit: OrbitState;
  mode: Mode = "rgb";
  lightDir: Vec3 = [0, 0, -1];
  status: ConnectionStatus = "connecting";
  roundTripMs: number | null = null;

  private sequence = 0;
  private dirty = true; // first flush announces the initial pose
  private inflight = new Map<number, number>(); // sequence -> send time ms

  constructor(orbit: OrbitState) {
    this.orbit = clampOrbit(orbit);
  }

  setOrbit(orbit: OrbitState): void {
    this.orbit = clampOrbit(orbit);
    this.dirty = true;
  }

  /** Re-announce the current pose, e.g. after a reconnect. */
  touch(): void {
    this.dirty = true;
  }

  setMode(mode: Mode): void {
    if (mode !== this.mode) {
      this.mode = mode;
      this.dirty = true;
    }
  }

  setLightDir(dir: Vec3): void {
    this.lightDir = dir;
    if (this.mode === "relit") {
      this.dirty = true;
    }
  }

  /** One pose per tick: returns null unless something changed since the last
      flush. Sequences increase by exactly 1 per message sent. */
  flush(view: ViewSize, now: number): PoseMessage | null {
    if (!this.dirty) {
      return null;
    }
    this.dirty = false;
    this.sequence = (this.sequence + 1) % SEQUENCE_LIMIT;
    this.inflight.set(this.sequence, now);
    if (this.inflight.size > INFLIGHT_CAP) {
      const oldest: number = this.inflight.keys().next().value!;
      this.inflight.delete(oldest);
    }
    return poseFromOrbit(this, view, this.sequence);
  }

  /** Round-trip for an echoed sequence, or null for one we never sent (or
      dropped as superseded). Updates roundTripMs only on a match. */
  onEcho(sequence: number, now: number): number | null {
    const sent = this.inflight.get(sequence);
    if (sent === undefined) {
      return null;
    }
    for (const key of this.inflight.keys()) {
      if (key <= sequence) {
        this.inflight.delete(key);
      }
    }
    this.roundTripMs = now - sent;
    return this.roundTripMs;
  }
}
