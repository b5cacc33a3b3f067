"""Record the protocol conformance fixtures under frontend/fixtures/.

Poses go through the server's parser and frames through the server's encoder,
so the recorded canonical values ARE the server's reading; the viewer's tests
replay the same files. Rerun after any deliberate protocol change:

    python3 tools/make_protocol_fixtures.py
"""
import dataclasses
import hashlib
import json
import pathlib

from splatforge import service
from splatforge.estimators import EstimatorConfig, run_estimator
from splatforge.evalkit import make_scene

OUT = pathlib.Path(__file__).resolve().parents[1] / "frontend" / "fixtures"


def base_pose(**over):
    pose = {"quaternion": [1.0, 0.0, 0.0, 0.0], "translation": [0.0, 0.0, 4.0],
            "fx": 100.0, "fy": 100.0, "width": 64, "height": 64,
            "mode": "rgb", "sequence": 0}
    pose.update(over)
    return pose


VALID = [
    ("minimal_rgb", base_pose()),
    ("renormalized_quaternion", base_pose(quaternion=[1.0004, 0.0, 0.0, 0.0])),
    ("tilted_quaternion", base_pose(
        quaternion=[0.8775825618903728 + 3e-4, 0.0, 0.479425538604203, 0.0],
        sequence=17)),
    ("normal_mode_fractional_intrinsics", base_pose(
        mode="normal", fx=123.456, fy=98.7, width=96, height=80)),
    ("relit_default_light", base_pose(mode="relit", sequence=3)),
    ("relit_explicit_light", base_pose(
        mode="relit", light_dir=[1 / 3, 2 / 3, -2 / 3], sequence=4)),
    ("bounds_and_max_sequence", base_pose(
        width=4096, height=64, sequence=4294967295)),
    ("extra_fields_ignored", base_pose(comment="keep me", hud=True)),
]

INVALID = [
    ("missing_quaternion", {k: v for k, v in base_pose().items()
                            if k != "quaternion"}, "quaternion"),
    ("quaternion_short", base_pose(quaternion=[1.0, 0.0, 0.0]), "quaternion"),
    ("quaternion_not_unit", base_pose(quaternion=[0.9, 0.0, 0.0, 0.0]),
     "quaternion"),
    ("quaternion_boolean", base_pose(quaternion=[True, 0.0, 0.0, 0.0]),
     "quaternion"),
    ("translation_short", base_pose(translation=[0.0, 0.0]), "translation"),
    ("translation_string", base_pose(translation="origin"), "translation"),
    ("fx_zero", base_pose(fx=0.0), "fx"),
    ("fy_negative", base_pose(fy=-2.0), "fy"),
    ("fx_string", base_pose(fx="60"), "fx"),
    ("width_below_range", base_pose(width=63), "width"),
    ("height_above_range", base_pose(height=4097), "height"),
    ("height_boolean", base_pose(height=True), "height"),
    ("mode_unknown", base_pose(mode="albedo"), "mode"),
    ("sequence_missing", {k: v for k, v in base_pose().items()
                          if k != "sequence"}, "sequence"),
    ("sequence_negative", base_pose(sequence=-1), "sequence"),
    ("sequence_fractional", base_pose(sequence=1.5), "sequence"),
    ("sequence_above_u32", base_pose(sequence=4294967296), "sequence"),
    ("light_dir_short", base_pose(mode="relit", light_dir=[0.0, 0.0]),
     "light_dir"),
    ("light_dir_not_unit", base_pose(mode="relit", light_dir=[0.0, 0.0, 0.9]),
     "light_dir"),
    ("not_an_object", [1, 2, 3], "pose"),
]

FRAME_POSES = [
    ("rgb_64", base_pose(sequence=11)),
    ("normal_96x80", base_pose(mode="normal", width=96, height=80,
                               fx=120.0, fy=120.0, sequence=12)),
    ("relit_64", base_pose(mode="relit", light_dir=[1 / 3, 2 / 3, -2 / 3],
                           sequence=13)),
]

BAD_FRAMES = [
    ("short_header", service.FRAME_MAGIC + b"\x00" * 8, "short"),
    ("bad_magic", b"NOPE" + b"\x00" * 45, "magic"),
    ("bad_mode_code", None, "mode"),      # patched from a good frame below
    ("payload_size_mismatch", None, "bytes"),
]


def record_poses():
    cases = []
    for name, message in VALID:
        pose = service.parse_pose(message)
        canonical = dataclasses.asdict(pose)
        canonical["quaternion"] = list(canonical["quaternion"])
        canonical["translation"] = list(canonical["translation"])
        if canonical["light_dir"] is not None:
            canonical["light_dir"] = list(canonical["light_dir"])
        cases.append({"name": name, "valid": True, "message": message,
                      "canonical": canonical})
    for name, message, reason in INVALID:
        try:
            service.parse_pose(message)
        except service.PoseFormatError as err:
            assert reason in str(err), (name, str(err))
        else:
            raise AssertionError(f"{name} unexpectedly parsed")
        cases.append({"name": name, "valid": False, "message": message,
                      "reason": reason})
    return cases


def record_frames():
    cloud, _ = make_scene("checker_sphere", 300, seed=1)
    splats = run_estimator(cloud, EstimatorConfig(kind="local_pca"))
    frames = []
    blobs = {}
    for name, message in FRAME_POSES:
        pose = service.parse_pose(message)
        rgba = service.render_pose(splats, pose)
        blob = service.encode_frame(pose, rgba, 4321, 987654)
        blobs[name] = blob
        (OUT / f"frame_{name}.bin").write_bytes(blob)
        frames.append({
            "name": name, "file": f"frame_{name}.bin",
            "sequence": pose.sequence, "width": pose.width,
            "height": pose.height, "mode": pose.mode,
            "mode_code": service.MODE_CODES[pose.mode],
            "render_micros": 4321, "preprocess_micros": 987654,
            "header_hex": blob[:service.FRAME_HEADER.size].hex(),
            "payload_sha256": hashlib.sha256(
                blob[service.FRAME_HEADER.size:]).hexdigest(),
        })

    good = bytearray(blobs["rgb_64"])
    with_bad_mode = bytes(good[:16]) + b"\x07" + bytes(good[17:])
    truncated = bytes(blobs["rgb_64"][:-5])
    rejects = []
    for name, blob, reason in BAD_FRAMES:
        blob = {"bad_mode_code": with_bad_mode,
                "payload_size_mismatch": truncated}.get(name, blob)
        try:
            service.decode_frame(blob)
        except ValueError as err:
            assert reason in str(err), (name, str(err))
        else:
            raise AssertionError(f"{name} unexpectedly decoded")
        rejects.append({"name": name, "hex": blob.hex(), "reason": reason})
    return frames, rejects


def main():
    OUT.mkdir(parents=True, exist_ok=True)
    poses = record_poses()
    frames, rejects = record_frames()
    (OUT / "poses.json").write_text(json.dumps({"cases": poses}, indent=1))
    (OUT / "frames.json").write_text(json.dumps(
        {"frames": frames, "rejects": rejects}, indent=1))
    print(f"recorded {len(poses)} pose cases, {len(frames)} frames, "
          f"{len(rejects)} frame rejects under {OUT}")


if __name__ == "__main__":
    main()
