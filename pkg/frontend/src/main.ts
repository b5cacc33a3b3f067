// Browser entry point: wires the canvas, the pointer and key bindings, the
// WebSocket connection, and the HUD to the session state. Protocol and
// camera math live in the DOM-free modules next to this one; this file only
// moves events in and pixels out.

import { decodeFrame, serializePose } from "./protocol.js";
import type { Mode } from "./protocol.js";
import { dollyOrbit, panOrbit, rotateOrbit } from "./orbit.js";
import { ViewerState } from "./state.js";
import {
  connectionStatus, errorStatus, formatMicros, formatMillis,
  gizmoFromLight, lightFromGizmo,
} from "./hud.js";
import type { StatusLine } from "./hud.js";

const MODE_KEYS: Record<string, Mode> = { "1": "rgb", "2": "normal", "3": "relit" };

function byId<T extends HTMLElement>(id: string): T {
  const el = document.getElementById(id);
  if (el === null) {
    throw new Error(`missing element #${id}`);
  }
  return el as T;
}

const canvas = byId<HTMLCanvasElement>("view");
const ctx = canvas.getContext("2d")!;
const gizmo = byId<HTMLCanvasElement>("gizmo");
const gizmoCtx = gizmo.getContext("2d")!;
const hud = {
  status: byId<HTMLSpanElement>("status"),
  mode: byId<HTMLSpanElement>("mode"),
  roundTrip: byId<HTMLSpanElement>("round-trip"),
  render: byId<HTMLSpanElement>("render-time"),
  preprocess: byId<HTMLSpanElement>("preprocess-time"),
};

const state = new ViewerState({
  azimuth: 0, elevation: 0, distance: 2.5, target: [0, 0, 0],
});
let serverError: StatusLine | null = null; // sticky until the next good frame
let lastRenderMicros: number | null = null;
let lastPreprocessMicros: number | null = null;

const serverUrl = new URLSearchParams(location.search).get("server")
  ?? `ws://${location.hostname || "127.0.0.1"}:8765`;
let socket: WebSocket | null = null;

function connect(): void {
  state.status = "connecting";
  const ws = new WebSocket(serverUrl);
  ws.binaryType = "arraybuffer";
  ws.onopen = () => {
    state.status = "open";
    state.touch();
  };
  ws.onclose = () => {
    state.status = "closed";
    socket = null;
    setTimeout(connect, 1000);
  };
  ws.onerror = () => {
    state.status = "error";
  };
  ws.onmessage = (ev: MessageEvent<string | ArrayBuffer>) => {
    onMessage(ev.data);
  };
  socket = ws;
}

function onMessage(data: string | ArrayBuffer): void {
  if (typeof data === "string") {
    // Rejected pose; the canvas keeps the last good frame.
    let text = data;
    try {
      text = String(JSON.parse(data).error ?? data);
    } catch {
      // not JSON; show the raw text
    }
    serverError = errorStatus(text);
    return;
  }
  let frame;
  try {
    frame = decodeFrame(data);
  } catch (err) {
    serverError = errorStatus(String(err instanceof Error ? err.message : err));
    return;
  }
  serverError = null;
  if (canvas.width !== frame.width || canvas.height !== frame.height) {
    canvas.width = frame.width;
    canvas.height = frame.height;
  }
  const pixels = new Uint8ClampedArray(
    frame.rgba.buffer, frame.rgba.byteOffset, frame.rgba.length);
  ctx.putImageData(new ImageData(pixels, frame.width, frame.height), 0, 0);
  state.onEcho(frame.sequence, performance.now());
  lastRenderMicros = frame.render_micros;
  lastPreprocessMicros = frame.preprocess_micros;
}

function drawHud(): void {
  const line = serverError ?? connectionStatus(state.status);
  hud.status.textContent = line.text;
  hud.status.className = `value ${line.level}`;
  hud.mode.textContent = state.mode;
  hud.roundTrip.textContent = formatMillis(state.roundTripMs);
  hud.render.textContent = lastRenderMicros === null ? "--" : formatMicros(lastRenderMicros);
  hud.preprocess.textContent =
    lastPreprocessMicros === null ? "--" : formatMicros(lastPreprocessMicros);
  gizmo.style.display = state.mode === "relit" ? "block" : "none";
  if (state.mode === "relit") {
    drawGizmo();
  }
}

function drawGizmo(): void {
  const size = gizmo.width;
  const half = size / 2;
  gizmoCtx.clearRect(0, 0, size, size);
  gizmoCtx.strokeStyle = "#8a8a8a";
  gizmoCtx.fillStyle = "rgba(20, 20, 20, 0.6)";
  gizmoCtx.beginPath();
  gizmoCtx.arc(half, half, half - 1, 0, 2 * Math.PI);
  gizmoCtx.fill();
  gizmoCtx.stroke();
  const [gx, gy] = gizmoFromLight(state.lightDir);
  gizmoCtx.fillStyle = "#ffd75e";
  gizmoCtx.beginPath();
  gizmoCtx.arc(half + gx * (half - 4), half + gy * (half - 4), 4, 0, 2 * Math.PI);
  gizmoCtx.fill();
}

type DragKind = "rotate" | "pan";
let drag: { kind: DragKind; x: number; y: number } | null = null;

canvas.addEventListener("pointerdown", (ev) => {
  canvas.setPointerCapture(ev.pointerId);
  const kind: DragKind = ev.shiftKey || ev.button === 2 ? "pan" : "rotate";
  drag = { kind, x: ev.clientX, y: ev.clientY };
});
canvas.addEventListener("pointermove", (ev) => {
  if (drag === null) {
    return;
  }
  const dx = ev.clientX - drag.x;
  const dy = ev.clientY - drag.y;
  drag = { ...drag, x: ev.clientX, y: ev.clientY };
  state.setOrbit(drag.kind === "pan"
    ? panOrbit(state.orbit, dx, dy, canvas.height)
    : rotateOrbit(state.orbit, dx, dy));
});
canvas.addEventListener("pointerup", (ev) => {
  canvas.releasePointerCapture(ev.pointerId);
  drag = null;
});
canvas.addEventListener("contextmenu", (ev) => ev.preventDefault());
canvas.addEventListener("wheel", (ev) => {
  ev.preventDefault();
  state.setOrbit(dollyOrbit(state.orbit, ev.deltaY));
}, { passive: false });

window.addEventListener("keydown", (ev) => {
  const mode = MODE_KEYS[ev.key];
  if (mode !== undefined) {
    state.setMode(mode);
  }
});

let lightDrag = false;
function gizmoPick(ev: PointerEvent): void {
  const rect = gizmo.getBoundingClientRect();
  const gx = ((ev.clientX - rect.left) / rect.width) * 2 - 1;
  const gy = ((ev.clientY - rect.top) / rect.height) * 2 - 1;
  state.setLightDir(lightFromGizmo(gx, gy));
}
gizmo.addEventListener("pointerdown", (ev) => {
  ev.stopPropagation();
  gizmo.setPointerCapture(ev.pointerId);
  lightDrag = true;
  gizmoPick(ev);
});
gizmo.addEventListener("pointermove", (ev) => {
  if (lightDrag) {
    gizmoPick(ev);
  }
});
gizmo.addEventListener("pointerup", (ev) => {
  gizmo.releasePointerCapture(ev.pointerId);
  lightDrag = false;
});

function tick(): void {
  if (socket !== null && socket.readyState === WebSocket.OPEN) {
    const pose = state.flush(
      { width: canvas.width, height: canvas.height }, performance.now());
    if (pose !== null) {
      socket.send(serializePose(pose));
    }
  }
  drawHud();
  requestAnimationFrame(tick);
}

connect();
requestAnimationFrame(tick);
