"""Command line entry point: ``appsplat {train,eval,relight,ddim-demo}``.

Every artifact is written below the configured output directory and carries
the config hash. Failures print one ``error code=.. kind=.. msg=..`` line to
stderr and exit with 2 (config), 3 (numeric) or 4 (I/O).
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from . import artifacts as A
from . import config as C
from . import guidance as G
from ._rng import make_rng
from .appearance import AppearanceModel, export_embeddings_csv
from .errors import ConfigError, NonFiniteLoss, SpecHashMismatch
from .evaluate import metrics_csv, render_combo
from .geom import generate_scene
from .losses import loss_csv_header, loss_csv_row, prepare_scene
from .net import load_checkpoint, save_checkpoint, spec_hash
from .pipeline import (cross_study, fit_denoiser, guided_study, heldout_pairs, heldout_scenes,
                       train_model, training_scenes)
from .relight import make_pair, pair_manifest, sample_light_pair

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4
VIEW_SCALE = 8


def _out(cfg, *parts) -> str:
    path = os.path.join(cfg.output.dir, *parts)
    os.makedirs(os.path.dirname(path), exist_ok=True)
    return path


def _embedding_rows(model, scenes, pairs):
    rows = []
    for sd, p in zip(scenes, pairs):
        K = sd.n_ring
        rows.append((f"scene{p.scene_seed}_src", model.embed(p.src[:K])))
        rows.append((f"scene{p.scene_seed}_aug", model.embed(p.aug[:K])))
    return rows


def cmd_train(cfg: C.Config, threads: int = 1, log=None) -> dict:
    """Train, then write the checkpoint, per-step losses and final embeddings."""
    h = cfg.hash()
    lines = [A.csv_header(h), loss_csv_header()]

    def record(rep):
        lines.append(loss_csv_row(rep))
        if log is not None and (rep.step % 100 == 0):
            log(f"step {rep.step} total {rep.total:.6f}")

    res = train_model(cfg, threads, callback=record)
    files = {"checkpoint": _out(cfg, "checkpoint.bin"), "losses": _out(cfg, "losses.csv"),
             "embeddings": _out(cfg, "embeddings.csv"), "config": _out(cfg, "config.txt")}
    save_checkpoint(files["checkpoint"], res.model.params, cfg.model_hash())
    A.write_text(files["losses"], "\n".join(lines) + "\n")
    scenes = heldout_scenes(cfg, threads)
    rows = _embedding_rows(res.model, scenes, heldout_pairs(cfg, scenes))
    A.write_text(files["embeddings"], export_embeddings_csv(rows, f"config_hash={h}"))
    A.write_text(files["config"], C.dump(cfg))
    return files


def cmd_eval(cfg: C.Config, checkpoint: str | None = None, threads: int = 1) -> dict:
    """2x2 cross-appearance table on held-out pairs plus a contact sheet."""
    h = cfg.hash()
    path = checkpoint or os.path.join(cfg.output.dir, "checkpoint.bin")
    try:
        params, _ = load_checkpoint(path, expected_hash=cfg.model_hash())
    except SpecHashMismatch:
        raise
    except (ValueError, EOFError) as e:
        raise OSError(f"{path}: unreadable checkpoint ({e})") from e
    model = AppearanceModel(cfg.model_config(), params)
    scenes = heldout_scenes(cfg, threads)
    pairs = heldout_pairs(cfg, scenes)
    study = cross_study(model, scenes, pairs)
    text = [A.csv_header(h)]
    for i, (p, rows) in enumerate(zip(pairs, study.rows)):
        body = metrics_csv(rows, tag=f"scene{p.scene_seed}")
        text.append(body if i == 0 else body.split("\n", 1)[1])
    text.append(f"# mean matched psnr src={study.matched[0]!r} aug={study.matched[1]!r}\n"
                f"# mean swapped psnr src_geom={study.swapped[0]!r} aug_geom={study.swapped[1]!r}\n"
                f"# mean |base_src-base_aug|={study.base_delta!r} |base-albedo|={study.base_albedo!r}\n")
    files = {"csv": _out(cfg, "cross_appearance.csv"), "sheet": _out(cfg, "cross_appearance.png")}
    A.write_text(files["csv"], "".join(text[:1]) + "\n" + "".join(text[1:]))

    sd, p = scenes[0], pairs[0]
    st = {k: model.stream(v[:sd.n_ring], sd.patch_idx) for k, v in (("src", p.src), ("aug", p.aug))}
    grid = []
    for g in ("src", "aug"):
        grid.append([p.src[0]] + [render_combo(model, sd, st[g].feat, st[e].a)[0]
                                  for e in ("src", "aug")] + [p.aug[0]])
    A.write_png(files["sheet"], A.contact_sheet(grid), h, scale=VIEW_SCALE)
    return files


def cmd_relight(cfg: C.Config, threads: int = 1) -> dict:
    """Paired source/augmented renders of the configured scene."""
    h = cfg.hash()
    spec = cfg.scene_spec()
    sd = prepare_scene(generate_scene(spec), cfg.model.patch, threads)
    ls, la = sample_light_pair(make_rng(spec.seed, "lights"), cfg.light_sampling())
    pair = make_pair(sd.scene, sd.cameras, ls, la, maps=sd.maps)
    names = []
    for kind, stack in (("src", pair.src), ("aug", pair.aug), ("albedo", pair.albedo)):
        for i, img in enumerate(stack):
            base = f"{kind}_cam{i}"
            A.write_png(_out(cfg, "relight", base + ".png"), img, h)
            A.write_ppm(_out(cfg, "relight", base + ".ppm"), img, h)
            names += [base + ".png", base + ".ppm"]
    manifest = _out(cfg, "relight", "manifest.txt")
    A.write_text(manifest, pair_manifest(pair, names, f"config_hash={h}"))
    return {"manifest": manifest, "dir": os.path.dirname(manifest)}


def cmd_ddim_demo(cfg: C.Config, threads: int = 1) -> dict:
    """Guided vs unguided refinement of two views sharing a denoiser and noise."""
    h = cfg.hash()
    spec = cfg.scene_spec()
    den = fit_denoiser(cfg, training_scenes(cfg, threads))
    sd = prepare_scene(generate_scene(spec), cfg.model.patch, threads)
    study = guided_study(cfg, den.params, sd, seed=spec.seed)
    lam = cfg.guidance.lam
    out = {}
    imgs = {"reference": study.references[0],
            "unguided": G.from_latent(study.results[0.0][0].z0),
            "guided": G.from_latent(study.results[lam][0].z0)}
    for name, img in imgs.items():
        out[name] = _out(cfg, "ddim", name + ".png")
        A.write_png(out[name], img, h)
        A.write_ppm(_out(cfg, "ddim", name + ".ppm"), img, h)
    rows = [[study.references[v], G.from_latent(study.results[0.0][v].z0),
             G.from_latent(study.results[lam][v].z0)] for v in range(2)]
    out["side_by_side"] = _out(cfg, "ddim", "side_by_side.png")
    A.write_png(out["side_by_side"], A.contact_sheet(rows), h, scale=VIEW_SCALE)
    out["w_trace"] = _out(cfg, "ddim", "w_trace.csv")
    A.write_text(out["w_trace"], G.w_trace_csv(study.results[lam][0], cfg.guidance.T, lam,
                                               f"config_hash={h}"))
    out["summary"] = _out(cfg, "ddim", "summary.csv")
    A.write_text(out["summary"], "\n".join([
        A.csv_header(h), "pairs,unguided,guided,reference",
        f"{study.n_pairs},{study.unguided!r},{study.guided!r},{study.reference!r}"]) + "\n")
    out["denoiser"] = _out(cfg, "ddim", "denoiser.bin")
    save_checkpoint(out["denoiser"], den.params, spec_hash(cfg.denoiser_config().__dict__))
    return out


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "relight": cmd_relight,
            "ddim-demo": cmd_ddim_demo}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="appsplat", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override one config key (repeatable)")
        p.add_argument("--out", help=f"output directory (else ${C.OUTPUT_ENV}, else config)")
        p.add_argument("--threads", type=int, default=1, help="render threads; 1 is reproducible")
        if name == "eval":
            p.add_argument("--checkpoint", help="defaults to <out>/checkpoint.bin")
    return ap


def _overrides(items) -> dict:
    out = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _fail(code: int, exc: BaseException) -> int:
    msg = json.dumps(str(exc).strip().splitlines()[0] if str(exc).strip() else "")
    print(f"error code={code} kind={type(exc).__name__} msg={msg}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        cfg = C.load(args.config, _overrides(args.set), args.out)
        fn = COMMANDS[args.command]
        if args.command == "eval":
            files = fn(cfg, args.checkpoint, threads=args.threads)
        elif args.command == "train":
            files = fn(cfg, threads=args.threads, log=lambda s: print(s, file=sys.stderr))
        else:
            files = fn(cfg, threads=args.threads)
    except (ConfigError, SpecHashMismatch) as e:
        return _fail(EXIT_CONFIG, e)
    except (NonFiniteLoss, FloatingPointError) as e:
        return _fail(EXIT_NUMERIC, e)
    except OSError as e:
        return _fail(EXIT_IO, e)
    for k, v in files.items():
        print(f"{k}\t{v}")
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
