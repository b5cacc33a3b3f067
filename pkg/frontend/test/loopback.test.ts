// End-to-end checks against a real render service on loopback: a pose flood
// must coalesce down to a few frames and still end on the newest sequence,
// and the HUD's round-trip figure must agree with an external timer.

import { spawn, spawnSync } from "node:child_process";
import type { ChildProcessWithoutNullStreams } from "node:child_process";
import { mkdtempSync, rmSync, writeFileSync } from "node:fs";
import { tmpdir } from "node:os";
import { join } from "node:path";
import { performance } from "node:perf_hooks";
import { afterAll, beforeAll, describe, expect, it } from "vitest";
import WebSocket from "ws";

import { decodeFrame, serializePose } from "../src/protocol.js";
import type { FrameMessage } from "../src/protocol.js";
import { poseFromOrbit } from "../src/orbit.js";
import { ViewerState } from "../src/state.js";

const CLI = "splatforge";
const VIEW = { width: 128, height: 128 };
const POINTS = 20_000;

const cliAvailable = spawnSync(CLI, ["--help"], { stdio: "ignore" }).status === 0;

function mulberry32(seed: number): () => number {
  let a = seed >>> 0;
  return () => {
    a = (a + 0x6d2b79f5) >>> 0;
    let t = a;
    t = Math.imul(t ^ (t >>> 15), t | 1);
    t ^= t + Math.imul(t ^ (t >>> 7), t | 61);
    return ((t ^ (t >>> 14)) >>> 0) / 4294967296;
  };
}

// Random sphere-surface cloud in the PLY layout the CLI loads.
function writeSpherePly(path: string): void {
  const rand = mulberry32(42);
  const header = [
    "ply", "format binary_little_endian 1.0", `element vertex ${POINTS}`,
    "property float x", "property float y", "property float z",
    "property uchar red", "property uchar green", "property uchar blue",
    "end_header", "",
  ].join("\n");
  const body = Buffer.alloc(POINTS * 15);
  for (let i = 0; i < POINTS; i += 1) {
    const z = 2 * rand() - 1;
    const phi = 2 * Math.PI * rand();
    const r = Math.sqrt(Math.max(0, 1 - z * z));
    const p = [r * Math.cos(phi), r * Math.sin(phi), z] as const;
    const at = i * 15;
    body.writeFloatLE(p[0], at);
    body.writeFloatLE(p[1], at + 4);
    body.writeFloatLE(p[2], at + 8);
    body[at + 12] = p[0] > 0 ? 230 : 60;
    body[at + 13] = p[1] > 0 ? 200 : 90;
    body[at + 14] = p[2] > 0 ? 180 : 120;
  }
  writeFileSync(path, Buffer.concat([Buffer.from(header, "ascii"), body]));
}

function toArrayBuffer(data: WebSocket.RawData): ArrayBuffer {
  const buf = Array.isArray(data) ? Buffer.concat(data)
    : Buffer.isBuffer(data) ? data : Buffer.from(data as ArrayBuffer);
  return buf.buffer.slice(buf.byteOffset, buf.byteOffset + buf.byteLength) as ArrayBuffer;
}

function openSocket(port: number): Promise<WebSocket> {
  return new Promise((resolve, reject) => {
    const ws = new WebSocket(`ws://127.0.0.1:${port}`);
    ws.once("open", () => resolve(ws));
    ws.once("error", reject);
  });
}

function nextFrame(ws: WebSocket, timeoutMs = 30_000): Promise<FrameMessage> {
  return new Promise((resolve, reject) => {
    const timer = setTimeout(
      () => reject(new Error("timed out waiting for a frame")), timeoutMs);
    ws.once("message", (data, isBinary) => {
      clearTimeout(timer);
      if (!isBinary) {
        reject(new Error(`error frame: ${String(data)}`));
        return;
      }
      try {
        resolve(decodeFrame(toArrayBuffer(data)));
      } catch (err) {
        reject(err);
      }
    });
  });
}

describe.skipIf(!cliAvailable)("render service on loopback", () => {
  let workdir: string;
  let server: ChildProcessWithoutNullStreams;
  let port: number;

  beforeAll(async () => {
    workdir = mkdtempSync(join(tmpdir(), "viewer-loopback-"));
    const ply = join(workdir, "sphere.ply");
    writeSpherePly(ply);
    server = spawn(CLI, ["serve", "--input", ply, "--port", "0"]);
    port = await new Promise<number>((resolve, reject) => {
      let text = "";
      const timer = setTimeout(
        () => reject(new Error(`server never announced a port: ${text}`)), 90_000);
      server.stderr.on("data", (chunk: Buffer) => {
        text += chunk.toString();
        const hit = /serving \d+ splats on 127\.0\.0\.1:(\d+)/.exec(text);
        if (hit) {
          clearTimeout(timer);
          resolve(Number(hit[1]));
        }
      });
      server.once("exit", (code) => {
        clearTimeout(timer);
        reject(new Error(`server exited early (${code}): ${text}`));
      });
    });
  });

  afterAll(async () => {
    if (server && server.exitCode === null) {
      const gone = new Promise((resolve) => server.once("exit", resolve));
      server.kill("SIGTERM");
      await gone;
    }
    if (workdir) {
      rmSync(workdir, { recursive: true, force: true });
    }
  });

  it("coalesces a pose flood and ends on the newest sequence", async () => {
    const ws = await openSocket(port);
    try {
      const echoed: number[] = [];
      let failure: Error | null = null;
      const done = new Promise<void>((resolve, reject) => {
        const timer = setTimeout(
          () => reject(new Error(`flood never settled; echoed ${echoed}`)), 60_000);
        ws.on("message", (data, isBinary) => {
          if (!isBinary) {
            failure = new Error(`error frame: ${String(data)}`);
            return;
          }
          echoed.push(decodeFrame(toArrayBuffer(data)).sequence);
          if (echoed[echoed.length - 1] === 100) {
            clearTimeout(timer);
            resolve();
          }
        });
      });
      for (let sequence = 1; sequence <= 100; sequence += 1) {
        const pose = poseFromOrbit({
          orbit: {
            azimuth: sequence * 0.02, elevation: 0.1, distance: 2.5,
            target: [0, 0, 0],
          },
          mode: "rgb",
          lightDir: [0, 0, -1],
        }, VIEW, sequence);
        ws.send(serializePose(pose));
      }
      await done;
      expect(failure).toBeNull();
      expect(echoed[echoed.length - 1]).toBe(100);
      // the mailbox dropped the stale poses instead of answering all 100
      expect(echoed.length).toBeLessThan(100);
      for (let i = 1; i < echoed.length; i += 1) {
        expect(echoed[i]).toBeGreaterThan(echoed[i - 1]!);
      }
    } finally {
      ws.close();
    }
  });

  it("reports HUD round trips that agree with an external timer", async () => {
    const ws = await openSocket(port);
    try {
      const state = new ViewerState({
        azimuth: 0.3, elevation: 0.2, distance: 2.5, target: [0, 0, 0],
      });
      for (let i = 0; i < 5; i += 1) {
        state.touch();
        const pose = state.flush(VIEW, performance.now())!;
        const before = performance.now();
        const answered = nextFrame(ws);
        ws.send(serializePose(pose));
        const frame = await answered;
        const after = performance.now();
        const external = after - before;
        const reported = state.onEcho(frame.sequence, after);
        expect(frame.width).toBe(VIEW.width);
        expect(frame.height).toBe(VIEW.height);
        expect(reported).not.toBeNull();
        expect(Math.abs(reported! - external)).toBeLessThanOrEqual(5);
      }
    } finally {
      ws.close();
    }
  });

  it("keeps the connection open across a rejected pose", async () => {
    const ws = await openSocket(port);
    try {
      const rejected = new Promise<string>((resolve, reject) => {
        const timer = setTimeout(
          () => reject(new Error("no error frame arrived")), 30_000);
        ws.once("message", (data, isBinary) => {
          clearTimeout(timer);
          if (isBinary) {
            reject(new Error("expected an error frame"));
          } else {
            resolve(String(data));
          }
        });
      });
      ws.send(JSON.stringify({ width: 10 }));
      const error = JSON.parse(await rejected) as { error: string };
      expect(error.error).toContain("quaternion");

      const pose = poseFromOrbit({
        orbit: { azimuth: 0, elevation: 0, distance: 2.5, target: [0, 0, 0] },
        mode: "relit",
        lightDir: [0.6, 0, -0.8],
      }, VIEW, 7);
      const answered = nextFrame(ws);
      ws.send(serializePose(pose));
      const frame = await answered;
      expect(frame.sequence).toBe(7);
      expect(frame.mode).toBe("relit");
    } finally {
      ws.close();
    }
  });
});
