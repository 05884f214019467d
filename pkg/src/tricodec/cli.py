"""Command-line surface: synth / train-base / encode / decode / render / bench."""

from __future__ import annotations

import os

# honor the worker-count pin before numpy spins up its thread pools
_threads = os.environ.get("CODEC_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                 "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

import json
import sys
from pathlib import Path

import click
import numpy as np

from .errors import TricodecError


def _load_synth_spec(path):
    path = Path(path)
    text = path.read_text()
    if path.suffix.lower() == ".toml":
        try:
            import tomllib
        except ModuleNotFoundError:
            import tomli as tomllib
        return tomllib.loads(text)
    return json.loads(text)


def _fail(exc):
    click.echo(f"error: {type(exc).__name__}: {exc}", err=True)
    sys.exit(1)


@click.group()
def main():
    """Desk-scale triplane radiance-field codec."""


@main.command()
@click.option("--spec", "spec_path", required=True, type=click.Path(exists=True),
              help="TOML/JSON primitive list")
@click.option("--out", "out_dir", required=True, type=click.Path())
def synth(spec_path, out_dir):
    """Render a synthetic scene with analytic ground truth."""
    from .scene import SynthSpec, save_scene, synth_scene
    try:
        spec = SynthSpec.from_dict(_load_synth_spec(spec_path))
        scene, _ = synth_scene(spec)
        save_scene(scene, out_dir, synth_spec=spec)
    except TricodecError as e:
        _fail(e)
    click.echo(f"wrote {len(scene.views)} views to {out_dir}")


@main.command("train-base")
@click.option("--scenes", "scene_dirs", required=True, multiple=True,
              type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--iters", default=300, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--channels", default=8, show_default=True)
@click.option("--volume-res", default=16, show_default=True)
@click.option("--codebook-size", default=64, show_default=True)
@click.option("--code-dim", default=8, show_default=True)
@click.option("--ray-batch", default=64, show_default=True)
def train_base_cmd(scene_dirs, out_path, iters, seed, channels, volume_res,
                   codebook_size, code_dim, ray_batch):
    """Train the shared encoder/decoder networks on synthetic scenes."""
    from .model import CodecModel, ModelConfig
    from .scene import load_scene
    from .training import TrainConfig, train_base
    try:
        config = ModelConfig.desk(channels=channels, volume_res=volume_res,
                                  codebook_size=codebook_size,
                                  code_dim=code_dim)
        model = CodecModel.init(config, seed=seed)
        scenes = [load_scene(d) for d in scene_dirs]
        tcfg = TrainConfig(mode="train-base", iterations=iters, seed=seed,
                           ray_batch=ray_batch)
        losses, secs = train_base(model, scenes, tcfg, log=click.echo)
        model.save(out_path)
    except TricodecError as e:
        _fail(e)
    click.echo(f"trained {iters} iterations in {secs:.1f}s, "
               f"final loss {np.mean(losses[-20:]):.4f}, model -> {out_path}")


def _train_config(mode, iters, lambda_rate, seed, config_path, ray_batch):
    from .training import TrainConfig, load_train_config
    if config_path:
        tcfg = load_train_config(config_path)
        return tcfg
    return TrainConfig(mode=mode, iterations=iters, lambda_rate=lambda_rate,
                       seed=seed, ray_batch=ray_batch)


@main.command()
@click.option("--scene", "scene_dir", required=True, type=click.Path(exists=True))
@click.option("--model", "model_path", required=True, type=click.Path(exists=True))
@click.option("--mode", type=click.Choice(["wo-ft", "full-ft", "peft", "peft++"]),
              default="peft", show_default=True)
@click.option("--iters", default=500, show_default=True)
@click.option("--lambda-rate", default=1e-3, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--ray-batch", default=64, show_default=True)
@click.option("--config", "config_path", type=click.Path(exists=True),
              help="TOML TrainConfig (overrides the flags)")
@click.option("--out", "out_path", required=True, type=click.Path())
def encode(scene_dir, model_path, mode, iters, lambda_rate, seed, ray_batch,
           config_path, out_path):
    """Encode a scene into a codec bitstream."""
    from .model import CodecModel
    from .pipeline import encode_scene, report_sizes
    from .scene import load_scene
    try:
        model = CodecModel.load(model_path)
        scene = load_scene(scene_dir)
        tcfg = _train_config(mode, iters, lambda_rate, seed, config_path,
                             ray_batch)
        data, _, rows = encode_scene(model, scene, tcfg)
        Path(out_path).write_bytes(data)
        report = report_sizes(data)
    except TricodecError as e:
        _fail(e)
    click.echo(f"wrote {len(data)} bytes to {out_path} "
               f"(total {report['total']['mb']:.3f} MB)")
    if rows:
        click.echo(f"final psnr {rows[-1].psnr:.2f} dB over eval views")


@main.command()
@click.option("--bitstream", "bs_path", required=True, type=click.Path(exists=True))
@click.option("--model", "model_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_dir", required=True, type=click.Path())
def decode(bs_path, model_path, out_dir):
    """Decode a bitstream; writes the effective planes + a summary."""
    from .model import CodecModel
    from .pipeline import decode_scene, report_sizes
    from .triplane import dump_triplanes
    try:
        model = CodecModel.load(model_path)
        data = Path(bs_path).read_bytes()
        codec = decode_scene(model, data)
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        dump_triplanes(codec.effective_planes(), out / "planes.tri")
        report = report_sizes(data)
        summary = {"mode": codec.mode,
                   "layout": model.config.to_dict(),
                   "sizes_mb": {k: v["mb"] for k, v in report.items()}}
        (out / "decode_summary.json").write_text(
            json.dumps(summary, indent=1, sort_keys=True))
    except TricodecError as e:
        _fail(e)
    click.echo(f"decoded {codec.mode} bitstream into {out_dir}")


@main.command()
@click.option("--bitstream", "bs_path", required=True, type=click.Path(exists=True))
@click.option("--model", "model_path", required=True, type=click.Path(exists=True))
@click.option("--poses", "poses_dir", required=True, type=click.Path(exists=True),
              help="scene directory supplying the camera poses")
@click.option("--views", default="eval", show_default=True,
              type=click.Choice(["eval", "all"]))
@click.option("--n-coarse", default=32, show_default=True)
@click.option("--n-fine", default=32, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--raw", is_flag=True,
              help="also write planar float32 dumps next to the PNGs")
@click.option("--out", "out_dir", required=True, type=click.Path())
def render(bs_path, model_path, poses_dir, views, n_coarse, n_fine, seed,
           raw, out_dir):
    """Render a decoded bitstream from the given poses."""
    from PIL import Image
    from .io_utils import write_raw_render
    from .metrics import psnr
    from .model import CodecModel, make_render_config
    from .pipeline import decode_scene
    from .scene import load_scene
    try:
        model = CodecModel.load(model_path)
        codec = decode_scene(model, Path(bs_path).read_bytes())
        scene = load_scene(poses_dir)
        rcfg = make_render_config(scene, n_coarse, n_fine,
                                  model.config.pe_freqs, seed)
        ids = scene.eval_ids if views == "eval" else range(len(scene.views))
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        scores = []
        for i in ids:
            view = scene.views[i]
            img, _ = codec.render(view, rcfg, key=seed + i)
            arr = np.clip(np.rint(img * 255), 0, 255).astype(np.uint8)
            Image.fromarray(arr, "RGB").save(out / f"render_{i:03d}.png")
            if raw:
                write_raw_render(out / f"render_{i:03d}.f32", img)
            scores.append(psnr(img, view.image))
    except TricodecError as e:
        _fail(e)
    click.echo(f"rendered {len(scores)} views, "
               f"mean psnr {np.mean(scores):.2f} dB -> {out_dir}")


@main.command()
@click.option("--scene", "scene_dir", required=True, type=click.Path(exists=True))
@click.option("--model", "model_path", required=True, type=click.Path(exists=True))
@click.option("--modes", default="wo-ft,peft,peft++",
              show_default=True)
@click.option("--iters", default=500, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--ray-batch", default=64, show_default=True)
@click.option("--out", "out_dir", required=True, type=click.Path())
def bench(scene_dir, model_path, modes, iters, seed, ray_batch, out_dir):
    """Metrics-per-checkpoint CSV plus a size table per mode."""
    from .bitstream import size_report_markdown
    from .model import CodecModel
    from .pipeline import encode_scene, report_sizes
    from .scene import load_scene
    from .training import MetricsRow, TrainConfig
    try:
        model = CodecModel.load(model_path)
        scene = load_scene(scene_dir)
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        csv_lines = ["mode," + MetricsRow.CSV_HEADER]
        tables = []
        for mode in modes.split(","):
            tcfg = TrainConfig(mode=mode, iterations=iters, seed=seed,
                               ray_batch=ray_batch)
            data, _, rows = encode_scene(model, scene, tcfg)
            report = report_sizes(data)
            for row in rows:
                row.size_mb = report["total"]["mb"]
                csv_lines.append(f"{mode},{row.to_csv()}")
            tables.append(f"### {mode}\n\n"
                          + size_report_markdown(report, mode))
        (out / "metrics.csv").write_text("\n".join(csv_lines) + "\n")
        (out / "sizes.md").write_text("\n\n".join(tables) + "\n")
    except TricodecError as e:
        _fail(e)
    click.echo(f"bench results in {out_dir}")


if __name__ == "__main__":
    main()
