"""Command-line entry points.

Every command takes ``--config``; ``--out`` overrides the run directory,
``--seed`` and ``--deterministic`` override the matching config fields (and
so change the config hash). Precondition failures exit with status 2.

Run directory layout::

    config.yaml          resolved configuration, with its hash
    prototypes.bin       prototype bank (build-prototypes)
    train_log.jsonl      one record per iteration
    checkpoints/         periodic checkpoints
    final.pt             last checkpoint
    loss_trace.png
    eval_<mode>.csv/.png
"""

import functools
import json
import logging
import sys
from pathlib import Path

import click
import numpy as np
import yaml

from . import pipeline as P
from .config import ConfigError, config_hash, load_config, to_dict
from .evaluation import DegenerateProbeError, UndefinedMetricError
from .prototypes import PrototypeBank
from .segmentation import ConfigurationError, IngestionError
from .synth import generate_corpus, load_image, load_label_map, save_image, translating_square_video
from .trainer import NonFiniteLossError, load_model_from_checkpoint
from .vlm import EncoderUnavailableError

log = logging.getLogger("pixseg")

EXIT_PRECONDITION = 2
EXIT_NUMERIC = 3

_EXPECTED = (
    ConfigError,
    ConfigurationError,
    IngestionError,
    FileNotFoundError,
    UndefinedMetricError,
    DegenerateProbeError,
    EncoderUnavailableError,
)


def _guard(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except _EXPECTED as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(EXIT_PRECONDITION)
        except NonFiniteLossError as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(EXIT_NUMERIC)
        except ValueError as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(EXIT_PRECONDITION)

    return wrapper


def _load(config, out, seed, deterministic):
    overrides = {}
    if seed is not None:
        overrides["seed"] = seed
        overrides["train.seed"] = seed
    if deterministic is not None:
        overrides["train.deterministic"] = deterministic
    cfg = load_config(config, overrides=overrides)
    if out is not None:
        cfg.output_dir = str(Path(out))
    run = Path(cfg.output_dir)
    run.mkdir(parents=True, exist_ok=True)
    chash = config_hash(cfg)
    doc = {"config_hash": chash, **to_dict(cfg)}
    (run / "config.yaml").write_text(yaml.safe_dump(doc, sort_keys=True), encoding="utf-8")
    return cfg, run, chash


def common_options(fn):
    fn = click.option("--deterministic/--no-deterministic", default=None,
                      help="Force deterministic kernels (default: from config).")(fn)
    fn = click.option("--seed", type=int, default=None, help="Override the run seed.")(fn)
    fn = click.option("--out", type=click.Path(file_okay=False), default=None, help="Run directory.")(fn)
    fn = click.option("--config", "config", type=click.Path(exists=True, dir_okay=False), required=True,
                      help="YAML run configuration.")(fn)
    return fn


# -- command bodies (also used by the tests) -------------------------------------


def build_prototypes(cfg, run, chash):
    data = P.load_dataset(cfg.dataset.image_dir)
    dense, text = P.make_encoder(cfg)
    feats = P.dense_features(dense, data)
    bank = P.build_prototype_bank(cfg, text, feats)
    bank.config_hash = chash
    path = run / "prototypes.bin"
    bank.save(path)
    return bank, path


def train(cfg, run, chash, bank_path=None, resume=None, iterations=None):
    bank_path = Path(bank_path) if bank_path else run / "prototypes.bin"
    if not bank_path.exists():
        raise FileNotFoundError(f"prototype bank {bank_path} not found; run build-prototypes first")
    bank = PrototypeBank.load(bank_path)
    if bank.names != list(cfg.eval.known_classes):
        raise ConfigError(f"bank classes {bank.names} differ from eval.known_classes {cfg.eval.known_classes}")
    if bank.u != cfg.train.unknown_u:
        raise ConfigError(f"bank has u={bank.u} unknown prototypes, config asks for {cfg.train.unknown_u}")
    data = P.load_dataset(cfg.dataset.image_dir)
    dense, _ = P.make_encoder(cfg)
    feats = P.dense_features(dense, data)
    priors = P.load_priors(cfg, data)
    trainer = P.make_trainer(cfg, data, feats, priors, bank)
    log_path = run / "train_log.jsonl"
    if resume:
        trainer.load_checkpoint(resume)
        keep = [line for line in log_path.read_text(encoding="utf-8").splitlines()
                if json.loads(line)["iteration"] < trainer.iteration] if log_path.exists() else []
        log_path.write_text("".join(line + "\n" for line in keep), encoding="utf-8")
    elif log_path.exists():
        log_path.unlink()
    trainer.fit(iterations, log_path=log_path, checkpoint_dir=run / "checkpoints")
    trainer.save_checkpoint(run / "final.pt")
    trainer.bank.save(run / "prototypes_trained.bin", config_hash=chash)
    records = P.read_log(log_path)
    if records:
        P.plot_loss_trace(run / "loss_trace.png", records, chash)
    return trainer, records


def _eval_split(cfg):
    if not cfg.eval.image_dir:
        raise ConfigError("eval.image_dir is not set")
    if not cfg.eval.gt_dir:
        raise ConfigError("metric modes need eval.gt_dir (ground truth)")
    return P.load_dataset(cfg.eval.image_dir, cfg.eval.gt_dir)


def _load_video(video_dir):
    vd = Path(video_dir)
    frame_paths = sorted((vd / "frames").glob("*.png"))
    if len(frame_paths) < 2:
        raise FileNotFoundError(f"{vd}/frames needs at least two PNG frames")
    masks = []
    for p in frame_paths:
        m = vd / "masks" / p.name
        if not m.exists():
            raise FileNotFoundError(f"missing mask {m}")
        masks.append(load_label_map(m))
    return [load_image(p) for p in frame_paths], masks


def evaluate(cfg, run, chash, mode, checkpoint=None, save_preds=False):
    ckpt = Path(checkpoint) if checkpoint else run / "final.pt"
    if not ckpt.exists():
        raise FileNotFoundError(f"checkpoint {ckpt} not found; run train first")
    model, bank, _ = load_model_from_checkpoint(ckpt)
    names = cfg.class_names
    extra = {}
    if mode == "track":
        if not cfg.eval.video_dir:
            raise ConfigError("track mode needs eval.video_dir")
        frames, masks = _load_video(cfg.eval.video_dir)
        report, preds, _ = P.eval_tracking(model, frames, masks, cfg.eval.track_top_r, cfg.eval.track_radius)
    else:
        ev = _eval_split(cfg)
        emb = P.embed_all(model, ev.images)
        dense, text = P.make_encoder(cfg)
        if mode == "langseg":
            report, preds = P.eval_langseg(cfg, emb, ev.gts, text)
            ev_feats = P.dense_features(dense, ev)
            report.avgsim = P.eval_avgsim(emb, ev_feats, k=cfg.eval.segments, seed=cfg.seed)
            for name, d in P.unknown_discovery(bank, text, cfg, ev_feats, ev.gts).items():
                extra[f"unk_cos_{name}"] = d["best_cosine"]
                extra[f"unk_rate_{name}"] = d["unknown_rate"]
        else:
            train_split = P.load_dataset(cfg.dataset.image_dir, cfg.dataset.gt_dir) if cfg.dataset.gt_dir else None
            if train_split is None:
                raise ConfigError(f"{mode} mode needs dataset.gt_dir to label training segments")
            train_emb = P.embed_all(model, train_split.images)
            if mode == "knn":
                report, preds = P.eval_knn(train_emb, train_split.gts, emb, ev.gts, len(names),
                                           k=cfg.eval.knn_k, segments=cfg.eval.segments, seed=cfg.seed)
            elif mode == "linear":
                report, preds = P.eval_linear(train_emb, train_split.gts, emb, ev.gts, len(names), seed=cfg.seed)
            else:
                raise ConfigError(f"unknown eval mode {mode!r}")
    row = P.report_rows(report, chash, run.name, mode, fold=cfg.eval.fold, class_names=names)
    row.update(extra)
    P.write_csv(run / f"eval_{mode}.csv", [row])
    metrics = ["J", "F"] if mode == "track" else ["mIoU", "mIoU_k", "mIoU_u", "hIoU", "avgsim"]
    metrics = [m for m in metrics if row.get(m) is not None]
    P.plot_metrics(run / f"eval_{mode}.png", [row], metrics, chash, title=f"{mode} ({chash})")
    if save_preds:
        pred_dir = run / f"preds_{mode}"
        pred_dir.mkdir(exist_ok=True)
        for n, p in enumerate(preds):
            from PIL import Image

            Image.fromarray(np.asarray(p, dtype=np.uint8)).save(pred_dir / f"{n:04d}.png")
    return row


LOSS_NAMES = ("L_t", "L_e", "L_s")


def ablation_rows(run_dirs, metric="mIoU"):
    """One row per loss-weight setting: which terms were on, plus the metrics."""
    rows = []
    for d in run_dirs:
        d = Path(d)
        cfg = yaml.safe_load((d / "config.yaml").read_text(encoding="utf-8"))
        weights = cfg["train"]["loss_weights"]
        ev = P.read_csv(d / "eval_langseg.csv")[0]
        row = {name: ("x" if w > 0 else "") for name, w in zip(LOSS_NAMES, weights)}
        row.update({"run": d.name, "config_hash": ev["config_hash"], "avgsim": ev.get("avgsim", ""),
                    metric: ev.get(metric, "")})
        rows.append(row)
    return rows


def report(run_dirs, out, ablation=False):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    rows, schema = [], None
    for d in run_dirs:
        csvs = sorted(Path(d).glob("eval_*.csv"))
        if not csvs:
            raise FileNotFoundError(f"no eval_*.csv in {d}")
        for c in csvs:
            part = P.read_csv(c)
            mode = part[0]["mode"]
            if schema is None:
                schema = {}
            cols = tuple(part[0].keys())
            if mode in schema and schema[mode] != cols:
                raise ConfigError(f"{c}: columns differ from earlier {mode} reports")
            schema[mode] = cols
            rows.extend(part)
    P.write_csv(out / "report.csv", rows)
    hashes = ",".join(sorted({r["config_hash"] for r in rows}))
    for mode in sorted({r["mode"] for r in rows}):
        sel = [r for r in rows if r["mode"] == mode]
        metrics = [m for m in ("mIoU", "mIoU_k", "mIoU_u", "hIoU", "avgsim", "J", "F") if sel[0].get(m)]
        if metrics:
            P.plot_metrics(out / f"report_{mode}.png", sel, metrics, hashes, title=mode)
    if ablation:
        abl = ablation_rows(run_dirs)
        P.write_csv(out / "ablation.csv", abl)
    return rows


def gen_synth(out, seed=0, n_train=48, n_eval=16, size=32, dim=16):
    out = Path(out)
    generate_corpus(out, n_train=n_train, n_eval=n_eval, size=size, seed=seed, dim=dim)
    frames, masks = translating_square_video(seed=seed)
    (out / "video" / "frames").mkdir(parents=True, exist_ok=True)
    (out / "video" / "masks").mkdir(parents=True, exist_ok=True)
    from PIL import Image

    for t, (f, m) in enumerate(zip(frames, masks)):
        save_image(out / "video" / "frames" / f"{t:04d}.png", f)
        Image.fromarray(m.astype(np.uint8)).save(out / "video" / "masks" / f"{t:04d}.png")
    cfg = synthetic_config(seed=seed)
    (out / "config.yaml").write_text(yaml.safe_dump(cfg, sort_keys=False), encoding="utf-8")
    return out


def synthetic_config(seed=0, iterations=400):
    """Settings tuned for the bundled synthetic corpus (paths relative to it)."""
    return {
        "seed": seed,
        "output_dir": "runs/synthetic",
        "dataset": {
            "image_dir": "train/images",
            "gt_dir": "train/gt",
            "region_prior": {"method": "slic", "n_regions": 36, "compactness": 10.0},
        },
        "encoder": {"kind": "stub", "palette": "palette.json", "noise_sigma": 0.3, "stride": 4, "seed": seed},
        "train": {
            "iterations": iterations,
            "batch_size": 4,
            "lr": 0.05,
            "anchors_per_view": 256,
            "hidden": 32,
            "seed": seed,
        },
        "augment": {"scale": [0.5, 1.0], "hue": 0.03, "brightness": 0.2, "contrast": 0.2, "saturation": 0.2},
        "eval": {
            "image_dir": "eval/images",
            "gt_dir": "eval/gt",
            "video_dir": "video",
            "known_classes": ["red", "green", "blue"],
            "unknown_classes": ["yellow"],
        },
    }


# -- click wiring ------------------------------------------------------------------


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Log progress to stderr.")
def main(verbose):
    """Train and evaluate language-guided pixel embeddings."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(levelname)s %(message)s")


@main.command("build-prototypes")
@common_options
@_guard
def build_prototypes_cmd(config, out, seed, deterministic):
    """Build known and unknown prototypes from the training corpus."""
    cfg, run, chash = _load(config, out, seed, deterministic)
    bank, path = build_prototypes(cfg, run, chash)
    click.echo(f"wrote {path}: k={bank.k} known ({', '.join(bank.names)}), u={bank.u} unknown, d={bank.dim}, "
               f"config_hash={chash}")


@main.command("train")
@common_options
@click.option("--bank", type=click.Path(dir_okay=False), default=None,
              help="Prototype bank to import (default: <run>/prototypes.bin).")
@click.option("--resume", type=click.Path(exists=True, dir_okay=False), default=None, help="Checkpoint to resume.")
@click.option("--iterations", type=int, default=None, help="Stop early at this iteration.")
@_guard
def train_cmd(config, out, seed, deterministic, bank, resume, iterations):
    """Train the pixel embedder."""
    cfg, run, chash = _load(config, out, seed, deterministic)
    trainer, records = train(cfg, run, chash, bank, resume, iterations)
    last = records[-1] if records else {}
    click.echo(f"trained to iteration {trainer.iteration}; final total loss {last.get('total', float('nan')):.4f}; "
               f"config_hash={chash}")


@main.command("eval")
@common_options
@click.option("--mode", type=click.Choice(["langseg", "knn", "linear", "track"]), required=True)
@click.option("--checkpoint", type=click.Path(dir_okay=False), default=None,
              help="Checkpoint to evaluate (default: <run>/final.pt).")
@click.option("--save-preds", is_flag=True, help="Write predictions as label PNGs.")
@_guard
def eval_cmd(config, out, seed, deterministic, mode, checkpoint, save_preds):
    """Evaluate a checkpoint and write eval_<mode>.csv and a plot."""
    cfg, run, chash = _load(config, out, seed, deterministic)
    row = evaluate(cfg, run, chash, mode, checkpoint, save_preds)
    shown = {k: v for k, v in row.items() if v is not None and not k.startswith("iou_")}
    click.echo(json.dumps(shown, default=float))


@main.command("report")
@click.argument("run_dirs", nargs=-1, required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--out", type=click.Path(file_okay=False), required=True)
@click.option("--ablation", is_flag=True, help="Also write a loss-ablation matrix (ablation.csv).")
@_guard
def report_cmd(run_dirs, out, ablation):
    """Merge eval reports from one or more run directories."""
    rows = report(run_dirs, out, ablation)
    click.echo(f"merged {len(rows)} rows into {Path(out) / 'report.csv'}")


@main.command("export-bank")
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--out", type=click.Path(dir_okay=False), required=True)
@_guard
def export_bank_cmd(checkpoint, out):
    """Write the (trained) prototype bank stored in a checkpoint."""
    _, bank, state = load_model_from_checkpoint(checkpoint)
    bank.save(out, config_hash=state.get("config_hash", ""))
    click.echo(f"wrote {out}: k={bank.k}, u={bank.u}, d={bank.dim}")


@main.command("gen-synth")
@click.option("--out", type=click.Path(file_okay=False), required=True)
@click.option("--seed", type=int, default=0)
@click.option("--n-train", type=int, default=48)
@click.option("--n-eval", type=int, default=16)
@click.option("--size", type=int, default=32)
@click.option("--dim", type=int, default=16, help="Stub embedding dimension.")
@_guard
def gen_synth_cmd(out, seed, n_train, n_eval, size, dim):
    """Generate the synthetic shape corpus, a tracking video and a config."""
    path = gen_synth(out, seed, n_train, n_eval, size, dim)
    click.echo(f"wrote synthetic corpus to {path}; config at {path / 'config.yaml'}")


if __name__ == "__main__":
    main()
