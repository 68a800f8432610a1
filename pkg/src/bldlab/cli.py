"""``bldlab`` command line: data, training, inference, evaluation and verification.

Options resolve as flags > ``--config`` file (``key = value`` lines) > defaults.
Every run writes ``<subcommand>.config.json`` into ``--out-dir``. Machine-readable
summaries go to stdout as JSON lines, diagnostics to stderr.

Exit codes: 0 success, 1 validation error (bad flag, bad input), 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__, nn
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data import gen_dataset, load_manifest, make_scene, training_mask
from .denoiser import UNet, UNetConfig
from .diffusion import NoiseSchedule, SamplerConfig
from .imageio import read_pgm_mask, read_ppm, to_bytes, to_unit, write_ppm
from .masks import MaskError, resize_to_latent
from .metrics import evaluate_run
from .pipeline import InpaintRequest, PipelineError, bld_generate, bld_generate_batch, load_models, outpaint, write_result
from .report import ReportError, report_render
from .trainer import LatentDataset, TrainConfig, config_echo, reports_to_csv, train_denoiser
from .vae import FACTOR, VAE, VaeConfig, VaeTrainConfig, encode_batch, fit_latent_scale, train_step as vae_step
from .verify import gradient_suite, identity_suite


class UsageError(Exception):
    pass


class ValidationError(Exception):
    pass


def _bool(v) -> bool:
    if isinstance(v, bool):
        return v
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _ints(v) -> tuple[int, ...]:
    if isinstance(v, (list, tuple)):
        return tuple(int(x) for x in v)
    return tuple(int(x) for x in str(v).replace(",", " ").split())


def _cond(v):
    return None if str(v).lower() in ("none", "null", "-1") else int(v)


@dataclass(frozen=True)
class Opt:
    key: str
    type: object
    default: object
    help: str = ""
    flag: bool = False    # boolean switch (``--name`` sets True)


GLOBAL = [
    Opt("seed", int, 0, "root seed"),
    Opt("out_dir", str, "out", "output directory"),
    Opt("threads", int, 1, "worker cap for data generation and batch evaluation"),
]

SAMPLER = [
    Opt("steps", int, 50, "sampler steps"),
    Opt("stride", int, 20, "timestep stride"),
    Opt("guidance", float, 3.0, "classifier-free guidance scale"),
    Opt("condition", _cond, 0, "class id, or 'none' for the null class"),
    Opt("paste", _bool, False, "paste original pixels into the preserved region", flag=True),
    Opt("vae", str, None, "VAE checkpoint"),
    Opt("unet", str, None, "denoiser checkpoint"),
]

COMMANDS: dict[str, list[Opt]] = {
    "gen-data": [Opt("n", int, 64, "number of scenes")],
    "train-vae": [
        Opt("data", str, None, "dataset directory from gen-data"),
        Opt("steps", int, 2000), Opt("batch_size", int, 8), Opt("lr", float, 1e-3),
        Opt("kl_weight", float, 1e-6), Opt("widths", _ints, (32, 64), "encoder widths, e.g. 32,64"),
        Opt("blend_objective", _bool, False, "train on blended reconstructions", flag=True),
        Opt("freeze_encoder", _bool, False, "update the decoder only", flag=True),
        Opt("init", str, None, "checkpoint to fine-tune from"),
        Opt("masks_per_scene", int, 4), Opt("log_every", int, 100),
    ],
    "train-denoiser": [
        Opt("data", str, None, "dataset directory from gen-data"),
        Opt("vae", str, None, "VAE checkpoint used to encode the data"),
        Opt("mode", str, "standard", "standard or two-step"),
        Opt("lambda", float, 0.5, "weight of the second-step loss"),
        Opt("steps", int, 5000), Opt("batch_size", int, 8), Opt("lr", float, 1e-3),
        Opt("widths", _ints, (64, 128, 128)), Opt("temb_dim", int, 128),
        Opt("cond_dropout", float, 0.1), Opt("masks_per_scene", int, 4), Opt("log_every", int, 100),
    ],
    "inpaint": [
        Opt("image", str, None, "input PPM (single-image mode)"),
        Opt("mask", str, None, "mask PGM, white = preserve"),
        Opt("data", str, None, "dataset directory: inpaint every eval mask"),
        Opt("limit", int, 0, "max scenes in dataset mode (0 = all)"),
        Opt("batch", int, 16, "batch size in dataset mode"),
    ] + SAMPLER,
    "outpaint": [
        Opt("image", str, None, "input PPM"),
        Opt("keep_ratio", float, 0.5, "side fraction of the preserved centre"),
    ] + SAMPLER,
    "eval": [
        Opt("results", str, None), Opt("masks", str, None), Opt("references", str, None),
    ],
    "verify": [
        Opt("n", int, 1000, "random draws for the identity suite"),
        Opt("skip_gradients", _bool, False, flag=True),
    ],
    "report": [Opt("eval", str, None, "eval.json from the eval subcommand")],
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _globals(default) -> argparse.ArgumentParser:
    g = argparse.ArgumentParser(add_help=False)
    g.add_argument("--config", default=default, help="key = value file")
    for o in GLOBAL:
        g.add_argument(f"--{o.key.replace('_', '-')}", dest=o.key, type=o.type, default=default, help=o.help)
    return g


def build_parser() -> argparse.ArgumentParser:
    # globals are accepted before or after the subcommand; the subcommand copy must
    # not clobber values given before it, hence SUPPRESS there
    p = _Parser(prog="bldlab", description=__doc__.splitlines()[0], parents=[_globals(None)])
    common = _globals(argparse.SUPPRESS)
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    for name, opts in COMMANDS.items():
        sp = sub.add_parser(name, parents=[common], argument_default=argparse.SUPPRESS)
        for o in opts:
            flag = f"--{o.key.replace('_', '-')}"
            if o.flag:
                sp.add_argument(flag, dest=o.key, action="store_const", const=True, help=o.help)
            else:
                sp.add_argument(flag, dest=o.key, type=o.type, help=o.help)
    return p


def read_config_file(path) -> dict[str, str]:
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"{path}:{n}: expected key = value, got {line!r}")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k.replace("-", "_")] = v
    return out


def resolve(command: str, ns: argparse.Namespace) -> dict:
    """Merge defaults, config-file values and explicit flags (in increasing priority)."""
    opts = {o.key: o for o in GLOBAL + COMMANDS[command]}
    cfg = {k: o.default for k, o in opts.items()}
    if getattr(ns, "config", None):
        try:
            raw = read_config_file(ns.config)
        except OSError as exc:
            raise ValidationError(f"cannot read config file: {exc}") from exc
        for k, v in raw.items():
            if k not in opts:
                raise ValidationError(f"{ns.config}: unknown key {k!r} for {command}")
            try:
                cfg[k] = opts[k].type(v)
            except (TypeError, ValueError) as exc:
                raise ValidationError(f"{ns.config}: bad value for {k}: {exc}") from exc
    for k in opts:
        v = getattr(ns, k, None)
        if v is not None:
            cfg[k] = v
    return cfg


def _jsonable(v):
    if isinstance(v, tuple):
        return list(v)
    return v


def echo_config(command: str, cfg: dict) -> Path:
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"{command}.config.json"
    body = {"command": command, "version": __version__, **{k: _jsonable(v) for k, v in cfg.items()}}
    path.write_text(json.dumps(body, indent=1, sort_keys=True) + "\n")
    return path


def emit(record: dict) -> None:
    print(json.dumps(record, sort_keys=True), flush=True)


def _require(cfg: dict, *keys):
    absent = [k for k in keys if not cfg.get(k)]
    if absent:
        raise ValidationError("missing required option(s): " + ", ".join("--" + k.replace("_", "-") for k in absent))


# -- dataset helpers -----------------------------------------------------------------

def _load_images(data_dir: Path, manifest: dict) -> np.ndarray:
    return np.stack([to_unit(read_ppm(data_dir / "images" / f"{e['stem']}.ppm"))
                     for e in manifest["scenes"]]).astype(np.float32)


def _mask_pool(manifest: dict, seed: int, per_scene: int) -> np.ndarray:
    rng = np.random.default_rng([seed, 77])
    pool = []
    for e in manifest["scenes"]:
        scene = make_scene(e["seed"])
        pool.append([training_mask(scene, rng) for _ in range(per_scene)])
    return np.asarray(pool, dtype=np.uint8)


def _data(cfg):
    _require(cfg, "data")
    d = Path(cfg["data"])
    if not (d / "manifest.json").exists():
        raise ValidationError(f"{d}: no manifest.json (run gen-data first)")
    return d, load_manifest(d)


# -- subcommands -------------------------------------------------------------------

def cmd_gen_data(cfg):
    if cfg["n"] < 1:
        raise ValidationError(f"--n must be >= 1, got {cfg['n']}")
    out = Path(cfg["out_dir"])
    manifest = gen_dataset(cfg["n"], cfg["seed"], out, workers=max(1, cfg["threads"]))
    emit({"command": "gen-data", "scenes": manifest["n"], "out_dir": str(out)})


def cmd_train_vae(cfg):
    d, manifest = _data(cfg)
    x = _load_images(d, manifest)
    tcfg = VaeTrainConfig(kl_weight=cfg["kl_weight"], blend_objective=cfg["blend_objective"],
                          freeze_encoder=cfg["freeze_encoder"], lr=cfg["lr"], batch_size=cfg["batch_size"],
                          steps=cfg["steps"], seed=cfg["seed"])
    if cfg["init"]:
        ck = load_checkpoint(cfg["init"])
        model = VAE.from_config(ck.config["model"])
        model.parameters().load_state_dict(ck.tensors)
    else:
        if len(cfg["widths"]) != 2:
            raise ValidationError(f"--widths needs two values, got {list(cfg['widths'])}")
        model = VAE(VaeConfig(widths=tuple(cfg["widths"]), seed=cfg["seed"]))
    masks = _mask_pool(manifest, cfg["seed"], cfg["masks_per_scene"]) if tcfg.blend_objective else None
    params = model.parameters().subset("decoder.") if tcfg.freeze_encoder else model.parameters()
    opt = nn.Adam(params, lr=tcfg.lr)
    out = Path(cfg["out_dir"])
    rows = []
    for step in range(tcfg.steps):
        rng = np.random.default_rng([tcfg.seed, step, 2])
        idx = rng.integers(0, len(x), size=tcfg.batch_size)
        pair = None
        if masks is not None:
            m = masks[idx, rng.integers(0, masks.shape[1], size=tcfg.batch_size)]
            pair = (m, np.stack([resize_to_latent(mi, FACTOR) for mi in m]))
        rep = vae_step(model, x[idx], pair, opt, tcfg, step)
        rows.append(f"{rep.step},{rep.loss:.9g},{rep.recon:.9g},{rep.kl:.9g}")
        if cfg["log_every"] and step % cfg["log_every"] == 0:
            emit({"command": "train-vae", "step": step, "loss": rep.loss})
    if not cfg["init"]:
        fit_latent_scale(model, x[:256])
    (out / "vae_loss.csv").write_text("step,loss,recon,kl\n" + "".join(r + "\n" for r in rows))
    save_checkpoint(out / "vae.ckpt", model.parameters().state_dict(), None,
                    {"model": model.config_dict(), "train": {k: _jsonable(v) for k, v in cfg.items()}})
    emit({"command": "train-vae", "checkpoint": str(out / "vae.ckpt"), "steps": tcfg.steps,
          "latent_scale": model.latent_scale})


def _load_vae(path) -> VAE:
    ck = load_checkpoint(path)
    if "model" not in ck.config:
        raise ValidationError(f"{path}: not a VAE checkpoint")
    vae = VAE.from_config(ck.config["model"])
    vae.parameters().load_state_dict(ck.tensors)
    return vae


def cmd_train_denoiser(cfg):
    mode = cfg["mode"].replace("-", "_")
    if mode not in ("standard", "two_step"):
        raise ValidationError(f"--mode must be standard or two-step, got {cfg['mode']!r}")
    _require(cfg, "vae")
    d, manifest = _data(cfg)
    vae = _load_vae(cfg["vae"])
    x = _load_images(d, manifest)
    masks = _mask_pool(manifest, cfg["seed"], cfg["masks_per_scene"])
    scale = np.float32(vae.latent_scale)
    z0 = encode_batch(vae, x) * scale
    s, p = masks.shape[:2]
    xm = (x[:, None] * masks[:, :, None]).reshape((s * p,) + x.shape[1:]).astype(np.float32)
    zm = (encode_batch(vae, xm) * scale).reshape((s, p) + z0.shape[1:])
    mr = np.stack([[resize_to_latent(mi, FACTOR) for mi in row] for row in masks])
    data = LatentDataset(z0, np.array([e["class"] for e in manifest["scenes"]]), zm, mr)
    tcfg = TrainConfig(mode=mode, lam=cfg["lambda"], lr=cfg["lr"], batch_size=cfg["batch_size"],
                       steps=cfg["steps"], cond_dropout=cfg["cond_dropout"], seed=cfg["seed"])
    if len(cfg["widths"]) != 3:
        raise ValidationError(f"--widths needs three values, got {list(cfg['widths'])}")
    unet = UNet(UNetConfig(widths=tuple(cfg["widths"]), temb_dim=cfg["temb_dim"],
                           latent_channels=vae.cfg.latent_channels, seed=cfg["seed"]))
    schedule = NoiseSchedule()
    reports = train_denoiser(unet, schedule, data, tcfg, cfg["log_every"],
                             lambda r: emit({"command": "train-denoiser", "step": r.step, "loss": r.combined}))
    out = Path(cfg["out_dir"])
    (out / "loss.csv").write_text(reports_to_csv(reports))
    save_checkpoint(out / "unet.ckpt", unet.parameters().state_dict(), schedule,
                    {"model": unet.config_dict(), "train": config_echo(tcfg)})
    emit({"command": "train-denoiser", "checkpoint": str(out / "unet.ckpt"), "mode": mode,
          "lambda": tcfg.lam, "final_loss": reports[-1].combined if reports else None})


def _sampler(cfg) -> SamplerConfig:
    try:
        sc = SamplerConfig(num_steps=cfg["steps"], stride=cfg["stride"], guidance_scale=cfg["guidance"])
        sc.timesteps(1000)
    except ValueError as exc:
        raise ValidationError(str(exc)) from exc
    return sc


def cmd_inpaint(cfg):
    _require(cfg, "vae", "unet")
    sampler = _sampler(cfg)
    out = Path(cfg["out_dir"])
    if cfg["data"]:
        d, manifest = _data(cfg)
        models = load_models(cfg["vae"], cfg["unet"])
        scenes = manifest["scenes"][: cfg["limit"] or None]
        res_dir = out / "results"
        res_dir.mkdir(parents=True, exist_ok=True)
        for i in range(0, len(scenes), cfg["batch"]):
            chunk = scenes[i:i + cfg["batch"]]
            imgs = [read_ppm(d / "images" / f"{e['stem']}.ppm") for e in chunk]
            ms = np.stack([read_pgm_mask(d / "eval_masks" / f"{e['stem']}.pgm") for e in chunk])
            x0 = np.stack([to_unit(im) for im in imgs])
            cond = [e["class"] if cfg["condition"] is not None else None for e in chunk]
            seeds = [cfg["seed"] * 1_000_003 + i + j for j in range(len(chunk))]
            _, outs, _ = bld_generate_batch(models, x0, ms, cond, seeds, sampler, cfg["paste"])
            for e, o in zip(chunk, outs):
                write_ppm(res_dir / f"{e['stem']}.ppm", to_bytes(o))
        emit({"command": "inpaint", "images": len(scenes), "results_dir": str(res_dir)})
        return
    _require(cfg, "image", "mask")
    req = InpaintRequest(cfg["image"], cfg["mask"], cfg["condition"], cfg["seed"], sampler, cfg["paste"],
                         cfg["vae"], cfg["unet"])
    result = bld_generate(req)
    img_path, side = write_result(result, out / Path(cfg["image"]).stem)
    emit({"command": "inpaint", "output": str(img_path), "sidecar": str(side), "cd": result.cd,
          "preserved_max_dev": result.preserved_max_dev})


def cmd_outpaint(cfg):
    _require(cfg, "vae", "unet", "image")
    if not 0 < cfg["keep_ratio"] <= 1:
        raise ValidationError(f"--keep-ratio must be in (0, 1], got {cfg['keep_ratio']}")
    req = InpaintRequest(cfg["image"], None, cfg["condition"], cfg["seed"], _sampler(cfg), cfg["paste"],
                         cfg["vae"], cfg["unet"])
    result = outpaint(req, cfg["keep_ratio"])
    img_path, side = write_result(result, Path(cfg["out_dir"]) / (Path(cfg["image"]).stem + "_outpaint"))
    emit({"command": "outpaint", "output": str(img_path), "sidecar": str(side), "cd": result.cd})


def cmd_eval(cfg):
    _require(cfg, "results", "masks", "references")
    meta = {"results_dir": cfg["results"], "masks_dir": cfg["masks"], "references_dir": cfg["references"]}
    report = evaluate_run(cfg["results"], cfg["masks"], cfg["references"], cfg["out_dir"], meta)
    summary = report.to_json()["aggregate"]
    emit({"command": "eval", **summary, "missing": len(report.missing)})
    if report.missing:
        for m in report.missing:
            print(f"missing for {m['stem']}: {', '.join(m['missing'])}", file=sys.stderr)
        raise RuntimeError(f"{len(report.missing)} result(s) lack a mask or reference")
    if not report.rows:
        print("no result images found", file=sys.stderr)


def cmd_verify(cfg):
    checks = identity_suite(cfg["n"], cfg["seed"])
    if not cfg["skip_gradients"]:
        checks += gradient_suite(cfg["seed"])
    for c in checks:
        print(c.line(), file=sys.stderr)
        emit({"command": "verify", **c.to_dict()})
    (Path(cfg["out_dir"]) / "verify.json").write_text(
        json.dumps([c.to_dict() for c in checks], indent=1, sort_keys=True) + "\n")
    failed = [c.name for c in checks if not c.passed]
    if failed:
        raise RuntimeError("verification failed: " + ", ".join(failed))


def cmd_report(cfg):
    _require(cfg, "eval")
    summary = report_render(cfg["eval"], cfg["out_dir"])
    if summary["sheet"] is None:
        print(summary["message"], file=sys.stderr)
    emit({"command": "report", **summary})


HANDLERS = {
    "gen-data": cmd_gen_data, "train-vae": cmd_train_vae, "train-denoiser": cmd_train_denoiser,
    "inpaint": cmd_inpaint, "outpaint": cmd_outpaint, "eval": cmd_eval, "verify": cmd_verify,
    "report": cmd_report,
}

VALIDATION = (ValidationError, PipelineError, MaskError, CheckpointError)


def run(argv=None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
        if ns.command is None:
            raise UsageError(parser.format_usage() + "bldlab: error: a subcommand is required")
        cfg = resolve(ns.command, ns)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except ValidationError as exc:
        print(f"bldlab: error: {exc}", file=sys.stderr)
        return 1
    try:
        echo_config(ns.command, cfg)
        HANDLERS[ns.command](cfg)
    except VALIDATION as exc:
        print(f"bldlab {ns.command}: error: {exc}", file=sys.stderr)
        return 1
    except ReportError as exc:
        for m in exc.missing:
            print(f"missing: {m}", file=sys.stderr)
        return 2
    except (OSError, RuntimeError, ValueError) as exc:
        print(f"bldlab {ns.command}: failed: {exc}", file=sys.stderr)
        return 2
    return 0


def main() -> None:
    sys.exit(run())
