"""Problem ingestion and result export.

Formats:

* BAL problem files: header ``C P N``, then N observation lines
  ``cam_idx pt_idx u v``, then 9 scalars per camera (angle-axis rotation,
  translation, focal, k1, k2) and 3 per point, whitespace separated.
  Translations are converted to centers (t = -R^T T) on ingest so every
  solver sees the same pose convention.

* tracks files: a diff-able text carrier for Scene. ``#`` starts a comment;
  the header line is ``C P N``; then C camera records
  ``id qw qx qy qz tx ty tz f cx cy``, P point records ``id x y z`` and N
  observation records ``cam_id pt_id u v [depth]``. The depth column is all
  present or all absent. Scalars are written with 17 significant digits, so
  write -> read is lossless and read -> write is byte-stable.

* COLMAP text export (cameras.txt / images.txt / points3D.txt), pinhole
  scenes only.

* binary little-endian PLY point clouds.
"""

from __future__ import annotations

import os

import numpy as np

from .errors import (CountMismatch, DuplicateObservation, ParseError,
                     UnsupportedModel)
from .scene import (BAL_RADIAL, PINHOLE, Camera, Observation, Point3D, Scene,
                    axis_angle_to_quat_many, project, quat_to_matrix,
                    rotate_many, validate_scene)

_FMT = "%.17g"


class _Tokens:
    """Whitespace token stream that remembers line numbers and strips
    ``#`` comments."""

    def __init__(self, text: str):
        self.items: list[tuple[str, int]] = []
        for ln, line in enumerate(text.splitlines(), start=1):
            hash_pos = line.find("#")
            if hash_pos >= 0:
                line = line[:hash_pos]
            for tok in line.split():
                self.items.append((tok, ln))
        self.pos = 0
        self.last_line = self.items[-1][1] if self.items else 1

    def take(self, what: str) -> tuple[str, int]:
        if self.pos >= len(self.items):
            raise ParseError(self.last_line, f"unexpected end of file, expected {what}")
        tok = self.items[self.pos]
        self.pos += 1
        return tok

    def take_int(self, what: str) -> tuple[int, int]:
        tok, ln = self.take(what)
        try:
            return int(tok), ln
        except ValueError:
            raise ParseError(ln, f"expected integer {what}, got {tok!r}") from None

    def take_float(self, what: str) -> tuple[float, int]:
        tok, ln = self.take(what)
        try:
            return float(tok), ln
        except ValueError:
            raise ParseError(ln, f"expected number {what}, got {tok!r}") from None

    def exhausted(self) -> bool:
        return self.pos >= len(self.items)


# ---------------------------------------------------------------------------
# BAL
# ---------------------------------------------------------------------------

def read_bal(path) -> Scene:
    """Parse a Bundle-Adjustment-in-the-Large problem file."""
    with open(path, "r") as fh:
        toks = _Tokens(fh.read())
    c, _ = toks.take_int("camera count")
    p, _ = toks.take_int("point count")
    n, header_line = toks.take_int("observation count")
    if min(c, p, n) < 0:
        raise ParseError(header_line, "negative count in header")

    cam_idx = np.empty(n, dtype=np.int64)
    pt_idx = np.empty(n, dtype=np.int64)
    pixels = np.empty((n, 2))
    for k in range(n):
        ci, ln = toks.take_int("camera index")
        pi, _ = toks.take_int("point index")
        u, _ = toks.take_float("pixel u")
        v, _ = toks.take_float("pixel v")
        if not 0 <= ci < c:
            raise ParseError(ln, f"camera index {ci} out of range [0, {c})")
        if not 0 <= pi < p:
            raise ParseError(ln, f"point index {pi} out of range [0, {p})")
        cam_idx[k], pt_idx[k] = ci, pi
        pixels[k] = (u, v)

    cam_params = np.empty((c, 9))
    for i in range(c):
        for k in range(9):
            cam_params[i, k], _ = toks.take_float(f"camera {i} parameter {k}")
    points = np.empty((p, 3))
    for j in range(p):
        for k in range(3):
            points[j, k], _ = toks.take_float(f"point {j} coordinate {k}")
    if not toks.exhausted():
        tok, ln = toks.take("")
        raise CountMismatch(f"line {ln}: {len(toks.items) - toks.pos + 1} "
                            f"trailing tokens after the last point record")

    quats = axis_angle_to_quat_many(cam_params[:, :3])
    # center form: t = -R^T T
    q_conj = quats * np.array([1.0, -1.0, -1.0, -1.0])
    centers = -rotate_many(q_conj, cam_params[:, 3:6])
    cameras = [Camera(quats[i], centers[i], float(cam_params[i, 6]),
                      np.zeros(2), BAL_RADIAL, cam_params[i, 7:9].copy())
               for i in range(c)]
    pts = [Point3D(points[j]) for j in range(p)]
    obs = [Observation(int(cam_idx[k]), int(pt_idx[k]), pixels[k]) for k in range(n)]
    scene = Scene(cameras, pts, obs)
    validate_scene(scene)
    return scene


# ---------------------------------------------------------------------------
# tracks
# ---------------------------------------------------------------------------

def write_tracks(scene: Scene, path) -> None:
    lines = ["# sparsesfm tracks 1"]
    if scene.cameras and scene.cameras[0].model_tag == BAL_RADIAL:
        lines.append("# model bal_radial: distortion coefficients not carried "
                     "by this format")
    lines.append(f"{scene.num_cameras} {scene.num_points} {scene.num_observations}")
    for i, cam in enumerate(scene.cameras):
        q = np.asarray(cam.rotation, dtype=float)
        t = np.asarray(cam.center, dtype=float)
        pp = np.asarray(cam.principal_point, dtype=float)
        vals = [q[0], q[1], q[2], q[3], t[0], t[1], t[2], cam.focal, pp[0], pp[1]]
        lines.append(f"{i} " + " ".join(_FMT % v for v in vals))
    for j, pt in enumerate(scene.points):
        x = np.asarray(pt.position, dtype=float)
        lines.append(f"{j} " + " ".join(_FMT % v for v in x))
    with_depth = bool(scene.observations) and scene.observations[0].depth is not None
    for o in scene.observations:
        vals = [o.pixel[0], o.pixel[1]]
        if with_depth:
            vals.append(o.depth)
        lines.append(f"{o.camera_id} {o.point_id} "
                     + " ".join(_FMT % v for v in vals))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_tracks(path) -> Scene:
    with open(path, "r") as fh:
        toks = _Tokens(fh.read())
    c, _ = toks.take_int("camera count")
    p, _ = toks.take_int("point count")
    n, header_line = toks.take_int("observation count")
    if min(c, p, n) < 0:
        raise ParseError(header_line, "negative count in header")

    cameras: list[Camera | None] = [None] * c
    for _ in range(c):
        cid, ln = toks.take_int("camera id")
        if not 0 <= cid < c:
            raise ParseError(ln, f"camera id {cid} out of range [0, {c})")
        if cameras[cid] is not None:
            raise ParseError(ln, f"duplicate camera id {cid}")
        vals = [toks.take_float(f"camera {cid} field {k}")[0] for k in range(10)]
        cameras[cid] = Camera(np.array(vals[0:4]), np.array(vals[4:7]),
                              vals[7], np.array(vals[8:10]))
    points: list[Point3D | None] = [None] * p
    for _ in range(p):
        pid, ln = toks.take_int("point id")
        if not 0 <= pid < p:
            raise ParseError(ln, f"point id {pid} out of range [0, {p})")
        if points[pid] is not None:
            raise ParseError(ln, f"duplicate point id {pid}")
        vals = [toks.take_float(f"point {pid} coordinate {k}")[0] for k in range(3)]
        points[pid] = Point3D(np.array(vals))

    # the depth column is all-present or all-absent, so the remaining token
    # count decides the record width
    remaining = len(toks.items) - toks.pos
    if n > 0 and remaining == 5 * n:
        with_depth = True
    elif remaining == 4 * n:
        with_depth = False
    else:
        raise CountMismatch(
            f"{remaining} observation tokens for {n} records; expected "
            f"{4 * n} (no depth) or {5 * n} (with depth)")

    observations = []
    for _ in range(n):
        ci, ln = toks.take_int("observation camera id")
        pi, _ = toks.take_int("observation point id")
        if not 0 <= ci < c:
            raise ParseError(ln, f"camera id {ci} out of range [0, {c})")
        if not 0 <= pi < p:
            raise ParseError(ln, f"point id {pi} out of range [0, {p})")
        u, _ = toks.take_float("pixel u")
        v, _ = toks.take_float("pixel v")
        depth = None
        if with_depth:
            depth, dln = toks.take_float("depth")
            if not depth > 0:
                raise ParseError(dln, f"depth must be positive, got {depth}")
        observations.append(Observation(ci, pi, np.array([u, v]), depth))

    scene = Scene(cameras, points, observations)
    validate_scene(scene)  # raises DuplicateObservation on repeated pairs
    return scene


# ---------------------------------------------------------------------------
# COLMAP text
# ---------------------------------------------------------------------------

def write_colmap_text(scene: Scene, out_dir) -> None:
    """Write cameras.txt / images.txt / points3D.txt for a pinhole scene."""
    for cam in scene.cameras:
        if cam.model_tag != PINHOLE:
            raise UnsupportedModel(
                f"COLMAP export supports pinhole scenes only, got {cam.model_tag}")
    os.makedirs(out_dir, exist_ok=True)

    obs_by_cam: list[list[int]] = [[] for _ in scene.cameras]
    obs_pos_in_image = {}
    for k, o in enumerate(scene.observations):
        obs_pos_in_image[k] = len(obs_by_cam[o.camera_id])
        obs_by_cam[o.camera_id].append(k)

    with open(os.path.join(out_dir, "cameras.txt"), "w") as fh:
        fh.write("# Camera list with one line of data per camera:\n"
                 "#   CAMERA_ID, MODEL, WIDTH, HEIGHT, PARAMS[]\n")
        for i, cam in enumerate(scene.cameras):
            pp = np.asarray(cam.principal_point, dtype=float)
            half = [1.0, 1.0]
            for k in obs_by_cam[i]:
                px = scene.observations[k].pixel
                half[0] = max(half[0], abs(px[0] - pp[0]))
                half[1] = max(half[1], abs(px[1] - pp[1]))
            w = int(2 * np.ceil(half[0] + 1))
            h = int(2 * np.ceil(half[1] + 1))
            fh.write(f"{i + 1} SIMPLE_PINHOLE {w} {h} "
                     f"{_FMT % cam.focal} {_FMT % pp[0]} {_FMT % pp[1]}\n")

    with open(os.path.join(out_dir, "images.txt"), "w") as fh:
        fh.write("# Image list with two lines of data per image:\n"
                 "#   IMAGE_ID, QW, QX, QY, QZ, TX, TY, TZ, CAMERA_ID, NAME\n"
                 "#   POINTS2D[] as (X, Y, POINT3D_ID)\n")
        for i, cam in enumerate(scene.cameras):
            q = np.asarray(cam.rotation, dtype=float)
            t = -(quat_to_matrix(q) @ np.asarray(cam.center, dtype=float))
            fh.write(f"{i + 1} " + " ".join(_FMT % v for v in q) + " "
                     + " ".join(_FMT % v for v in t)
                     + f" {i + 1} image_{i + 1:06d}.png\n")
            parts = []
            for k in obs_by_cam[i]:
                o = scene.observations[k]
                parts.append(f"{_FMT % o.pixel[0]} {_FMT % o.pixel[1]} "
                             f"{o.point_id + 1}")
            fh.write(" ".join(parts) + "\n")

    track_by_point: list[list[tuple[int, int]]] = [[] for _ in scene.points]
    for k, o in enumerate(scene.observations):
        track_by_point[o.point_id].append((o.camera_id, obs_pos_in_image[k]))
    with open(os.path.join(out_dir, "points3D.txt"), "w") as fh:
        fh.write("# 3D point list with one line of data per point:\n"
                 "#   POINT3D_ID, X, Y, Z, R, G, B, ERROR, "
                 "TRACK[] as (IMAGE_ID, POINT2D_IDX)\n")
        for j, pt in enumerate(scene.points):
            errs = []
            for cam_id, _ in track_by_point[j]:
                try:
                    uv = project(scene.cameras[cam_id], pt)
                except Exception:
                    continue
                for k in obs_by_cam[cam_id]:
                    if scene.observations[k].point_id == j:
                        errs.append(float(np.linalg.norm(
                            uv - scene.observations[k].pixel)))
                        break
            err = float(np.mean(errs)) if errs else 0.0
            track = " ".join(f"{c + 1} {idx}" for c, idx in track_by_point[j])
            x = np.asarray(pt.position, dtype=float)
            fh.write(f"{j + 1} " + " ".join(_FMT % v for v in x)
                     + f" 128 128 128 {_FMT % err} {track}\n")


# ---------------------------------------------------------------------------
# PLY
# ---------------------------------------------------------------------------

def write_ply(points: np.ndarray, path, colors: np.ndarray | None = None) -> None:
    """Binary little-endian PLY with float32 vertices and optional uchar RGB."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if not np.isfinite(points).all():
        raise IOError("PLY export requires finite coordinates")
    n = len(points)
    header = ["ply", "format binary_little_endian 1.0",
              f"element vertex {n}",
              "property float x", "property float y", "property float z"]
    if colors is not None:
        colors = np.asarray(colors, dtype=np.uint8).reshape(-1, 3)
        if len(colors) != n:
            raise IOError("color count must match point count")
        header += ["property uchar red", "property uchar green",
                   "property uchar blue"]
        rec = np.empty(n, dtype=np.dtype([("xyz", "<f4", 3), ("rgb", "u1", 3)]))
        rec["xyz"] = points.astype(np.float32)
        rec["rgb"] = colors
    else:
        rec = np.empty(n, dtype=np.dtype([("xyz", "<f4", 3)]))
        rec["xyz"] = points.astype(np.float32)
    header.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(rec.tobytes())
