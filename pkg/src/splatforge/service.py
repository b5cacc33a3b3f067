"""Frame-streaming render service and its wire protocol.

Clients send JSON pose messages as text frames; the server replies with
binary frames: a 33-byte header (magic, echoed sequence, dimensions, mode,
render and preprocess timings in microseconds) followed by row-major RGBA8.
Poses are folded into a depth-1 latest-wins mailbox per connection, so a
client flooding poses faster than the renderer only ever waits for the
newest one. Malformed messages produce a JSON error frame and leave the
connection open.
"""
from __future__ import annotations

import json
import math
import struct
import threading
import time
from dataclasses import dataclass

import numpy as np

from .gaussians import Camera, Splats, quat_to_rotmat
from .rasterizer import relight, render

FRAME_MAGIC = b"FRM1"
FRAME_HEADER = struct.Struct("<4sIIIBQQ")
MODE_CODES = {"rgb": 0, "normal": 1, "relit": 2}
MODE_NAMES = {code: name for name, code in MODE_CODES.items()}

_SIZE_RANGE = (64, 4096)
_AMBIENT = 0.2
_DIFFUSE = 0.8
_DEFAULT_LIGHT = (0.0, 0.0, -1.0)    # headlight for relit poses without one


class PoseFormatError(ValueError):
    """Pose message violates the schema; the text is sent back to the client."""


@dataclass(frozen=True)
class PoseMessage:
    """One requested view; quaternion is the camera rotation, wxyz order."""

    quaternion: tuple
    translation: tuple
    fx: float
    fy: float
    width: int
    height: int
    mode: str = "rgb"
    light_dir: tuple = None
    sequence: int = 0

    def camera(self) -> Camera:
        rot = quat_to_rotmat(np.asarray(self.quaternion, dtype=np.float64))
        return Camera(rot, np.asarray(self.translation, dtype=np.float64),
                      self.fx, self.fy, self.width / 2.0, self.height / 2.0,
                      self.width, self.height)


def _unit(values, name, tolerance) -> tuple:
    vec = np.asarray(values, dtype=np.float64)
    norm = float(np.linalg.norm(vec))
    if abs(norm - 1.0) > tolerance:
        raise PoseFormatError(f"{name} must be unit length within {tolerance}, "
                              f"got norm {norm:.6f}")
    return tuple(vec / norm)


def _numbers(obj, key, count):
    values = obj.get(key)
    if (not isinstance(values, (list, tuple)) or len(values) != count
            or not all(isinstance(v, (int, float)) and not isinstance(v, bool)
                       and math.isfinite(v) for v in values)):
        raise PoseFormatError(f"'{key}' must be a list of {count} numbers")
    return [float(v) for v in values]


def parse_pose(obj: dict, require_sequence: bool = True) -> PoseMessage:
    """Validate a decoded JSON object against the pose schema."""
    if not isinstance(obj, dict):
        raise PoseFormatError("pose must be a JSON object")
    quaternion = _unit(_numbers(obj, "quaternion", 4), "quaternion", 1e-3)
    translation = tuple(_numbers(obj, "translation", 3))
    intrinsics = {}
    for key in ("fx", "fy"):
        value = obj.get(key)
        if (not isinstance(value, (int, float)) or isinstance(value, bool)
                or not math.isfinite(value) or value <= 0):
            raise PoseFormatError(f"'{key}' must be a positive number")
        intrinsics[key] = float(value)
    sizes = {}
    for key in ("width", "height"):
        value = obj.get(key)
        if not isinstance(value, int) or isinstance(value, bool) or \
                not _SIZE_RANGE[0] <= value <= _SIZE_RANGE[1]:
            raise PoseFormatError(f"'{key}' must be an integer in "
                                  f"[{_SIZE_RANGE[0]}, {_SIZE_RANGE[1]}]")
        sizes[key] = value
    mode = obj.get("mode", "rgb")
    if mode not in MODE_CODES:
        raise PoseFormatError(f"unknown mode '{mode}'; expected one of "
                              f"{tuple(MODE_CODES)}")
    light_dir = None
    if obj.get("light_dir") is not None:
        light_dir = _unit(_numbers(obj, "light_dir", 3), "light_dir", 1e-3)
    sequence = obj.get("sequence", 0 if not require_sequence else None)
    if (not isinstance(sequence, int) or isinstance(sequence, bool)
            or not 0 <= sequence < 2 ** 32):
        raise PoseFormatError("'sequence' must be a non-negative integer "
                              "below 2**32")
    return PoseMessage(quaternion, translation, intrinsics["fx"], intrinsics["fy"],
                       sizes["width"], sizes["height"], mode, light_dir, sequence)


def to_rgba(plane: np.ndarray, transmittance: np.ndarray) -> np.ndarray:
    """Quantize a [0,1] plane to RGBA8; alpha is the accumulated coverage."""
    rgb = np.clip(np.rint(plane * 255.0), 0, 255).astype(np.uint8)
    alpha = np.clip(np.rint((1.0 - transmittance) * 255.0), 0, 255).astype(np.uint8)
    return np.concatenate([rgb, alpha[:, :, None]], axis=2)


def render_pose(splats: Splats, pose: PoseMessage,
                background=(0.0, 0.0, 0.0)) -> np.ndarray:
    """The one render path shared by the CLI and the server: RGBA8 planes."""
    cam = pose.camera()
    if pose.mode == "normal":
        fb = render(splats, cam, "normal", background)
        return to_rgba(fb.normal * 0.5 + 0.5, fb.transmittance)
    fb = render(splats, cam, "rgb", background)
    if pose.mode == "relit":
        normal_fb = render(splats, cam, "normal", background)
        light = pose.light_dir if pose.light_dir is not None else _DEFAULT_LIGHT
        shaded = relight(normal_fb, fb, light, _AMBIENT, _DIFFUSE)
        return to_rgba(shaded, fb.transmittance)
    return to_rgba(fb.rgb, fb.transmittance)


def encode_frame(pose: PoseMessage, rgba: np.ndarray, render_micros: int,
                 preprocess_micros: int) -> bytes:
    if rgba.shape != (pose.height, pose.width, 4) or rgba.dtype != np.uint8:
        raise ValueError("payload must be (height, width, 4) uint8")
    header = FRAME_HEADER.pack(FRAME_MAGIC, pose.sequence, pose.width,
                               pose.height, MODE_CODES[pose.mode],
                               render_micros, preprocess_micros)
    return header + rgba.tobytes()


def decode_frame(blob: bytes):
    """Parse a binary frame into (fields dict, RGBA array); the test-side
    counterpart of encode_frame."""
    if len(blob) < FRAME_HEADER.size:
        raise ValueError(f"frame too short: {len(blob)} bytes")
    magic, sequence, width, height, mode, render_micros, preprocess_micros = \
        FRAME_HEADER.unpack_from(blob)
    if magic != FRAME_MAGIC:
        raise ValueError(f"bad frame magic {magic!r}")
    if mode not in MODE_NAMES:
        raise ValueError(f"unknown mode code {mode}")
    expected = FRAME_HEADER.size + width * height * 4
    if len(blob) != expected:
        raise ValueError(f"expected {expected} bytes, got {len(blob)}")
    rgba = np.frombuffer(blob, dtype=np.uint8, offset=FRAME_HEADER.size)
    fields = {"sequence": sequence, "width": width, "height": height,
              "mode": MODE_NAMES[mode], "render_micros": render_micros,
              "preprocess_micros": preprocess_micros}
    return fields, rgba.reshape(height, width, 4)


class _Mailbox:
    """Depth-1 latest-wins pose slot plus an ordered error queue."""

    def __init__(self):
        self._cond = threading.Condition()
        self._pose = None
        self._errors = []
        self._closed = False

    def put_pose(self, pose: PoseMessage):
        with self._cond:
            self._pose = pose
            self._cond.notify()

    def put_error(self, message: str):
        with self._cond:
            self._errors.append(message)
            self._cond.notify()

    def close(self):
        with self._cond:
            self._closed = True
            self._cond.notify()

    def take(self):
        """Blocks; returns (errors, pose or None, closed)."""
        with self._cond:
            self._cond.wait_for(
                lambda: self._errors or self._pose is not None or self._closed)
            errors, self._errors = self._errors, []
            pose, self._pose = self._pose, None
            return errors, pose, self._closed


def _receive_loop(connection, mailbox: _Mailbox):
    try:
        for message in connection:
            if isinstance(message, bytes):
                mailbox.put_error("pose messages must be JSON text frames")
                continue
            try:
                mailbox.put_pose(parse_pose(json.loads(message)))
            except json.JSONDecodeError as exc:
                mailbox.put_error(f"invalid JSON: {exc.msg}")
            except PoseFormatError as exc:
                mailbox.put_error(str(exc))
    except Exception:
        pass
    finally:
        mailbox.close()


def make_handler(splats: Splats, preprocess_micros: int,
                 background=(0.0, 0.0, 0.0)):
    """Connection handler closed over the preprocessed splats (read-only)."""

    def handler(connection):
        mailbox = _Mailbox()
        receiver = threading.Thread(target=_receive_loop,
                                    args=(connection, mailbox), daemon=True)
        receiver.start()
        try:
            while True:
                errors, pose, closed = mailbox.take()
                for message in errors:
                    connection.send(json.dumps({"error": message}))
                if pose is not None:
                    start = time.perf_counter()
                    rgba = render_pose(splats, pose, background)
                    render_micros = int((time.perf_counter() - start) * 1e6)
                    connection.send(encode_frame(pose, rgba, render_micros,
                                                 preprocess_micros))
                elif closed:
                    return
        except Exception:
            return
        finally:
            receiver.join(timeout=5.0)

    return handler


def start_server(splats: Splats, preprocess_micros: int, host: str, port: int,
                 background=(0.0, 0.0, 0.0)):
    """Bind and return the WebSocket server; caller runs serve_forever().

    Splats must already be estimated: per-frame work is render-only and
    every frame echoes the same preprocess_micros.
    """
    from websockets.sync.server import serve

    return serve(make_handler(splats, preprocess_micros, background),
                 host, port)
