// Orbit camera over the service's convention: p_cam = R p + t with +z
// looking forward and +y rendering downward. The orbit's vertical axis is
// world y, so positive elevation lifts the camera toward -y (screen up),
// and azimuth 0 / elevation 0 reduces to the head-on identity pose.

import type { Mode, PoseMessage, Quaternion, Vec3 } from "./protocol.js";

export interface OrbitState {
  azimuth: number; // radians around world y
  elevation: number; // radians, clamped inside (-pi/2, pi/2)
  distance: number; // > 0
  target: Vec3;
}

export interface ViewSize {
  width: number;
  height: number;
}

const ELEVATION_MAX = Math.PI / 2 - 1e-3;
const DISTANCE_MIN = 1e-3;
const ROTATE_RATE = 0.008; // radians per pixel dragged
const DOLLY_RATE = 0.0015; // log distance per wheel unit

export function clampOrbit(orbit: OrbitState): OrbitState {
  return {
    ...orbit,
    elevation: Math.min(ELEVATION_MAX, Math.max(-ELEVATION_MAX, orbit.elevation)),
    distance: Math.max(DISTANCE_MIN, orbit.distance),
  };
}

/** Dragging up raises the camera; dragging right orbits it eastward. */
export function rotateOrbit(orbit: OrbitState, dx: number, dy: number): OrbitState {
  return clampOrbit({
    ...orbit,
    azimuth: orbit.azimuth + dx * ROTATE_RATE,
    elevation: orbit.elevation - dy * ROTATE_RATE,
  });
}

/** Wheel dolly; multiplicative so the distance never crosses zero. */
export function dollyOrbit(orbit: OrbitState, wheel: number): OrbitState {
  return clampOrbit({ ...orbit, distance: orbit.distance * Math.exp(wheel * DOLLY_RATE) });
}

/** Shift the target in the camera plane so the content follows the cursor.
    dx, dy are pixels; focal converts them to world units at the target. */
export function panOrbit(orbit: OrbitState, dx: number, dy: number, focal: number): OrbitState {
  const [x, y] = orbitAxes(orbit.azimuth, orbit.elevation);
  const scale = orbit.distance / Math.max(focal, 1);
  const target: Vec3 = [
    orbit.target[0] - (dx * x[0] + dy * y[0]) * scale,
    orbit.target[1] - (dx * x[1] + dy * y[1]) * scale,
    orbit.target[2] - (dx * x[2] + dy * y[2]) * scale,
  ];
  return { ...orbit, target };
}

/** Camera axes as rows (x right, y image-down, z forward). */
export function orbitAxes(azimuth: number, elevation: number): [Vec3, Vec3, Vec3] {
  const ca = Math.cos(azimuth);
  const sa = Math.sin(azimuth);
  const ce = Math.cos(elevation);
  const se = Math.sin(elevation);
  const forward: Vec3 = [-ce * sa, se, ce * ca];
  // cross((0,1,0), forward), nonzero because elevation stays off the poles
  const xn = Math.hypot(forward[2], forward[0]);
  const x: Vec3 = [forward[2] / xn, 0, -forward[0] / xn];
  const y: Vec3 = [
    forward[1] * x[2] - forward[2] * x[1],
    forward[2] * x[0] - forward[0] * x[2],
    forward[0] * x[1] - forward[1] * x[0],
  ];
  return [x, y, forward];
}

/** Rotation rows to a unit quaternion (w, x, y, z), w kept non-negative. */
export function rotationToQuaternion(rows: [Vec3, Vec3, Vec3]): Quaternion {
  const [r0, r1, r2] = rows;
  const trace = r0[0] + r1[1] + r2[2];
  let q: Quaternion;
  if (trace > 0) {
    const s = 2 * Math.sqrt(trace + 1);
    q = [s / 4, (r2[1] - r1[2]) / s, (r0[2] - r2[0]) / s, (r1[0] - r0[1]) / s];
  } else if (r0[0] >= r1[1] && r0[0] >= r2[2]) {
    const s = 2 * Math.sqrt(1 + r0[0] - r1[1] - r2[2]);
    q = [(r2[1] - r1[2]) / s, s / 4, (r0[1] + r1[0]) / s, (r0[2] + r2[0]) / s];
  } else if (r1[1] >= r2[2]) {
    const s = 2 * Math.sqrt(1 + r1[1] - r0[0] - r2[2]);
    q = [(r0[2] - r2[0]) / s, (r0[1] + r1[0]) / s, s / 4, (r1[2] + r2[1]) / s];
  } else {
    const s = 2 * Math.sqrt(1 + r2[2] - r0[0] - r1[1]);
    q = [(r1[0] - r0[1]) / s, (r0[2] + r2[0]) / s, (r1[2] + r2[1]) / s, s / 4];
  }
  const norm = Math.hypot(q[0], q[1], q[2], q[3]);
  const sign = q[0] < 0 ? -1 : 1;
  return [sign * q[0] / norm, sign * q[1] / norm, sign * q[2] / norm, sign * q[3] / norm];
}

export interface CameraState {
  orbit: OrbitState;
  mode: Mode;
  lightDir: Vec3;
}

/** Build the pose for the current orbit. The focal length equals the canvas
    height, a fixed vertical field of view of about 53 degrees; the target
    always projects to the principal point. */
export function poseFromOrbit(state: CameraState, view: ViewSize, sequence: number): PoseMessage {
  const { azimuth, elevation, distance, target } = clampOrbit(state.orbit);
  const rows = orbitAxes(azimuth, elevation);
  const f = rows[2];
  const center: Vec3 = [
    target[0] - distance * f[0],
    target[1] - distance * f[1],
    target[2] - distance * f[2],
  ];
  const translation = rows.map(
    (row) => -(row[0] * center[0] + row[1] * center[1] + row[2] * center[2]),
  ) as Vec3;
  const focal = view.height;
  return {
    quaternion: rotationToQuaternion(rows),
    translation,
    fx: focal,
    fy: focal,
    width: view.width,
    height: view.height,
    mode: state.mode,
    light_dir: state.mode === "relit" ? state.lightDir : null,
    sequence,
  };
}
