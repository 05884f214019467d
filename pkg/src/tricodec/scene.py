"""Scene ingestion, role partitions, and a synthetic scene generator.

A scene directory holds ``manifest.json`` plus 8-bit PNG images. The
manifest either declares ``camera_angle_x`` (radians, shared pinhole)
or per-frame ``fx, fy, cx, cy``; each frame entry carries ``file_path``
and a row-major 4x4 ``transform_matrix`` (camera-to-world).

View roles partition the frames into encoder-input / finetune / eval
sets with encoder-input a subset of finetune and eval disjoint from
finetune. Synthetic scenes additionally come with an analytic
density/albedo field usable as a ground-truth oracle anywhere in the
[-1,1]^3 scene cube.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .camera import CameraView, generate_rays, look_at_pose, project
from .errors import ContractViolation, SceneFormatError

SCENE_HALF_EXTENT = 1.0    # all content lives in the cube [-1,1]^3
MANIFEST_NAME = "manifest.json"


@dataclass
class Scene:
    views: list
    near: float
    far: float
    input_ids: list          # encoder inputs, subset of finetune_ids
    finetune_ids: list
    eval_ids: list
    background_rgb: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if not self.views:
            raise SceneFormatError("scene has no views")
        if not self.near < self.far:
            raise SceneFormatError("scene requires near < far")
        si, sf, se = set(self.input_ids), set(self.finetune_ids), set(self.eval_ids)
        if not si <= sf:
            raise SceneFormatError("encoder-input views must be a subset of finetune views")
        if sf & se:
            raise SceneFormatError("finetune and eval view sets must be disjoint")
        all_ids = si | sf | se
        if not all_ids <= set(range(len(self.views))):
            raise SceneFormatError("view role index out of range")

    def subset(self, ids):
        return [self.views[i] for i in ids]

    @property
    def input_views(self):
        return self.subset(self.input_ids)

    @property
    def finetune_views(self):
        return self.subset(self.finetune_ids)

    @property
    def eval_views(self):
        return self.subset(self.eval_ids)


def default_roles(n):
    """Deterministic 16/24/rest-style split, scaled down for tiny scenes."""
    n_ft = min(24, max(1, n // 2)) if n < 50 else 24
    if n <= 2:
        n_ft = max(1, n - 1)
    n_in = min(16, max(1, (2 * n_ft + 2) // 3))
    finetune = list(range(n_ft))
    inputs = finetune[:n_in]
    evals = list(range(n_ft, n))
    return inputs, finetune, evals


# ---------------------------------------------------------------------------
# analytic synthetic scenes


@dataclass
class Primitive:
    kind: str                 # "sphere" | "box"
    center: tuple
    size: float | tuple       # radius, or half-extent (scalar or 3-tuple)
    sigma: float
    rgb: tuple

    def __post_init__(self):
        if self.kind not in ("sphere", "box"):
            raise ContractViolation(f"unknown primitive kind {self.kind!r}")
        c = np.asarray(self.center, dtype=np.float64)
        ext = np.max(np.abs(c)) + np.max(np.asarray(self.size, dtype=np.float64))
        if ext > SCENE_HALF_EXTENT + 1e-9:
            raise ContractViolation(
                f"primitive extends outside the scene cube (reach {ext:.3f})")


@dataclass
class SynthSpec:
    primitives: list
    background_rgb: tuple = (1.0, 1.0, 1.0)
    n_views: int = 12
    image_size: int = 32
    seed: int = 0
    camera_distance: float = 2.8
    focal_scale: float = 1.1   # fx = fy = focal_scale * image_size

    @staticmethod
    def from_dict(d):
        prims = [Primitive(kind=p["kind"],
                           center=tuple(p["center"]),
                           size=p.get("radius", p.get("half_extent", p.get("size"))),
                           sigma=float(p["sigma"]),
                           rgb=tuple(p["rgb"]))
                 for p in d.get("primitives", [])]
        return SynthSpec(
            primitives=prims,
            background_rgb=tuple(d.get("background_rgb", (1.0, 1.0, 1.0))),
            n_views=int(d.get("n_views", 12)),
            image_size=int(d.get("image_size", 32)),
            seed=int(d.get("seed", 0)),
            camera_distance=float(d.get("camera_distance", 2.8)),
            focal_scale=float(d.get("focal_scale", 1.1)),
        )

    def to_dict(self):
        prims = []
        for p in self.primitives:
            d = {"kind": p.kind, "center": list(p.center), "sigma": p.sigma,
                 "rgb": list(p.rgb)}
            if p.kind == "sphere":
                d["radius"] = p.size
            else:
                d["half_extent"] = (list(p.size) if np.ndim(p.size) else p.size)
            prims.append(d)
        return {"primitives": prims, "background_rgb": list(self.background_rgb),
                "n_views": self.n_views, "image_size": self.image_size,
                "seed": self.seed, "camera_distance": self.camera_distance,
                "focal_scale": self.focal_scale}


class AnalyticField:
    """Constant-density constant-albedo union of primitives; the oracle."""

    def __init__(self, spec):
        self.spec = spec

    def query(self, points):
        """points (N,3) -> (sigma (N,), rgb (N,3))."""
        p = np.asarray(points, dtype=np.float64)
        sigma = np.zeros(len(p))
        weighted = np.zeros((len(p), 3))
        for prim in self.spec.primitives:
            c = np.asarray(prim.center)
            if prim.kind == "sphere":
                inside = np.sum((p - c) ** 2, axis=1) <= float(prim.size) ** 2
            else:
                half = np.broadcast_to(np.asarray(prim.size, dtype=np.float64), (3,))
                inside = np.all(np.abs(p - c) <= half, axis=1)
            sigma += prim.sigma * inside
            weighted += (prim.sigma * inside)[:, None] * np.asarray(prim.rgb)
        rgb = np.where(sigma[:, None] > 0, weighted / np.maximum(sigma, 1e-30)[:, None],
                       0.0)
        return sigma, rgb

    def render_rays(self, origins, dirs, near, far, background, n_samples=512):
        """Midpoint-rule quadrature of the emission-absorption integral."""
        n = len(origins)
        ts = near + (np.arange(n_samples) + 0.5) * (far - near) / n_samples
        delta = (far - near) / n_samples
        rgb_out = np.zeros((n, 3))
        trans_out = np.zeros(n)
        block = max(1, 2 ** 22 // max(n_samples, 1))
        for s in range(0, n, block):
            o = origins[s:s + block]
            d = dirs[s:s + block]
            pts = o[:, None, :] + d[:, None, :] * ts[None, :, None]
            sigma, rgb = self.query(pts.reshape(-1, 3))
            sigma = sigma.reshape(len(o), n_samples)
            rgb = rgb.reshape(len(o), n_samples, 3)
            tau = sigma * delta
            t_excl = np.exp(-(np.cumsum(tau, axis=1) - tau))
            w = t_excl * (1.0 - np.exp(-tau))
            rgb_out[s:s + block] = np.sum(w[:, :, None] * rgb, axis=1)
            trans_out[s:s + block] = np.exp(-np.sum(tau, axis=1))
        rgb_out += trans_out[:, None] * np.asarray(background)
        return rgb_out, 1.0 - trans_out

    def render_view(self, view, near, far, background, n_samples=512):
        origins, dirs = generate_rays(view, near, far)
        rgb, alpha = self.render_rays(origins, dirs, near, far, background,
                                      n_samples)
        h, w = view.height, view.width
        return (rgb.reshape(h, w, 3).astype(np.float32),
                alpha.reshape(h, w).astype(np.float32))


def _synth_poses(spec):
    rng = np.random.default_rng(spec.seed)
    azim = (np.arange(spec.n_views) / spec.n_views * 2 * np.pi
            + rng.uniform(0, 2 * np.pi))
    elev = rng.uniform(-np.pi / 3, np.pi / 3, spec.n_views)
    d = spec.camera_distance
    poses = []
    for a, e in zip(azim, elev):
        eye = d * np.array([np.cos(e) * np.cos(a), np.cos(e) * np.sin(a),
                            np.sin(e)])
        poses.append(look_at_pose(eye))
    return poses


def synth_scene(spec):
    """Render a synthetic scene by quadrature; returns (Scene, AnalyticField)."""
    field_ = AnalyticField(spec)
    size = spec.image_size
    f = spec.focal_scale * size
    cx = cy = (size - 1) / 2.0
    near = max(0.05, spec.camera_distance - 1.8)
    far = spec.camera_distance + 1.8
    views = []
    for i, pose in enumerate(_synth_poses(spec)):
        view = CameraView(image=np.zeros((size, size, 3), dtype=np.float32),
                          pose=pose, fx=f, fy=f, cx=cx, cy=cy,
                          name=f"frame_{i:03d}")
        img, alpha = field_.render_view(view, near, far, spec.background_rgb)
        view.image = img
        view.alpha = alpha
        views.append(view)
    rng = np.random.default_rng(spec.seed + 1)
    n = spec.n_views
    n_in, n_ft, _ = map(len, default_roles(n))
    perm = rng.permutation(n)
    finetune = sorted(int(i) for i in perm[:n_ft])
    inputs = sorted(rng.choice(finetune, size=n_in, replace=False).tolist())
    evals = sorted(int(i) for i in perm[n_ft:])
    scene = Scene(views=views, near=near, far=far,
                  input_ids=inputs, finetune_ids=finetune, eval_ids=evals,
                  background_rgb=tuple(spec.background_rgb))
    return scene, field_


# ---------------------------------------------------------------------------
# disk format


def _quantize_image(img):
    return np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)


def save_scene(scene, path, synth_spec=None):
    """Write manifest + PNGs (+ the synth spec, when given, for the oracle)."""
    path = Path(path)
    (path / "images").mkdir(parents=True, exist_ok=True)
    frames = []
    for i, v in enumerate(scene.views):
        name = v.name or f"frame_{i:03d}"
        rel = f"images/{name}.png"
        rgb = _quantize_image(v.image)
        if v.alpha is not None:
            rgba = np.dstack([rgb, _quantize_image(v.alpha)])
            Image.fromarray(rgba, mode="RGBA").save(path / rel)
        else:
            Image.fromarray(rgb, mode="RGB").save(path / rel)
        frames.append({
            "file_path": rel,
            "transform_matrix": v.pose.tolist(),
            "fx": v.fx, "fy": v.fy, "cx": v.cx, "cy": v.cy,
        })
    manifest = {
        "frames": frames,
        "near": scene.near,
        "far": scene.far,
        "background_rgb": list(scene.background_rgb),
        "roles": {"input": scene.input_ids, "finetune": scene.finetune_ids,
                  "eval": scene.eval_ids},
    }
    (path / MANIFEST_NAME).write_text(json.dumps(manifest, indent=1, sort_keys=True))
    if synth_spec is not None:
        (path / "synth_spec.json").write_text(
            json.dumps(synth_spec.to_dict(), indent=1, sort_keys=True))


def load_oracle(path):
    """Reload the analytic field stored next to a synthetic scene."""
    spec_file = Path(path) / "synth_spec.json"
    if not spec_file.exists():
        return None
    return AnalyticField(SynthSpec.from_dict(json.loads(spec_file.read_text())))


def _load_image(path):
    try:
        with Image.open(path) as im:
            arr = np.asarray(im)
    except FileNotFoundError:
        raise SceneFormatError(f"missing image file: {path}")
    except OSError as e:
        raise SceneFormatError(f"corrupt image file {path}: {e}")
    if arr.ndim == 2:
        arr = np.repeat(arr[:, :, None], 3, axis=2)
    rgb = arr[:, :, :3].astype(np.float32) / 255.0
    alpha = (arr[:, :, 3].astype(np.float32) / 255.0
             if arr.ndim == 3 and arr.shape[2] == 4 else None)
    return rgb, alpha


def load_scene(path):
    path = Path(path)
    mf = path / MANIFEST_NAME
    if not mf.exists():
        raise SceneFormatError(f"no {MANIFEST_NAME} in {path}")
    try:
        manifest = json.loads(mf.read_text())
    except json.JSONDecodeError as e:
        raise SceneFormatError(f"malformed manifest: {e}")
    frames = manifest.get("frames", [])
    if not frames:
        raise SceneFormatError("manifest has an empty frame list")
    names = [f.get("file_path") for f in frames]
    if len(set(names)) != len(names):
        raise SceneFormatError("duplicate frame names in manifest")
    angle = manifest.get("camera_angle_x")
    views = []
    for f in frames:
        rgb, alpha = _load_image(path / f["file_path"])
        h, w = rgb.shape[:2]
        if "fx" in f:
            fx, fy = float(f["fx"]), float(f["fy"])
            cx, cy = float(f["cx"]), float(f["cy"])
        elif angle is not None:
            fx = fy = 0.5 * w / np.tan(0.5 * float(angle))
            cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
        else:
            raise SceneFormatError(
                "manifest needs camera_angle_x or per-frame intrinsics")
        try:
            view = CameraView(image=rgb, alpha=alpha,
                              pose=np.asarray(f["transform_matrix"], dtype=np.float64),
                              fx=fx, fy=fy, cx=cx, cy=cy,
                              name=Path(f["file_path"]).stem)
        except ContractViolation as e:
            raise SceneFormatError(f"frame {f['file_path']}: {e}")
        views.append(view)
    roles = manifest.get("roles")
    if roles is not None:
        inputs = list(roles["input"])
        finetune = list(roles["finetune"])
        evals = list(roles["eval"])
    else:
        inputs, finetune, evals = default_roles(len(views))
    dists = [np.linalg.norm(v.pose[:3, 3]) for v in views]
    near = manifest.get("near", max(0.05, min(dists) - np.sqrt(3.0)))
    far = manifest.get("far", max(dists) + np.sqrt(3.0))
    return Scene(views=views, near=float(near), far=float(far),
                 input_ids=inputs, finetune_ids=finetune, eval_ids=evals,
                 background_rgb=tuple(manifest.get("background_rgb", (1, 1, 1))))
