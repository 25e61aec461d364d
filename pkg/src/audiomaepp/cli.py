"""``audiomaepp`` command line: pretrain, extract, probe, score, verify (plus synth for toy data)."""
from __future__ import annotations

import argparse
import csv
import logging
import math
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import evalkit, model as mm, synthetic, verify
from .checkpoint import CheckpointError, load_checkpoint, read_manifest
from .config import ConfigError, RunConfig
from .dsp import AudioFormatError, crop_2s, load_wav, logmel, read_matrix, write_matrix
from .trainer import OptimConfig, pretrain

log = logging.getLogger("audiomaepp")


class UsageError(Exception):
    """Bad input from the user; exit status 2."""


# ------------------------------------------------------------------ helpers


def _config(args) -> RunConfig:
    rc = RunConfig.load(getattr(args, "config", None))
    if getattr(args, "seed", None) is not None:
        rc.set("run", "seed", args.seed)
    if getattr(args, "threads", None) is not None:
        rc.set("run", "threads", args.threads)
    return rc


def _out_dir(rc: RunConfig, args) -> Path:
    out = Path(args.out or rc.get("paths", "out") or "run")
    out.mkdir(parents=True, exist_ok=True)
    rc.set("paths", "out", str(out))
    return out


def _load_item(path: Path, shape, seed: int, index: int):
    if path.suffix == ".bin":
        s = read_matrix(path)
        if s.shape != shape:
            raise UsageError(f"{path}: spectrogram shape {s.shape} != {shape}")
        return s
    w = crop_2s(load_wav(path), np.random.default_rng([seed, index]))
    return logmel(w).astype(np.float32)


def load_dataset(directory, cfg: mm.ModelConfig, seed: int, threads: int = 1) -> np.ndarray:
    """Spectrogram binaries and/or WAV files (randomly cropped to 2 s, crop fixed by seed)."""
    d = Path(directory)
    if not d.is_dir():
        raise UsageError(f"data directory not found: {d}")
    files = sorted(p for p in d.iterdir() if p.suffix in (".bin", ".wav"))
    if not files:
        raise UsageError(f"no .bin or .wav files in {d}")
    jobs = [(p, cfg.input_shape, seed, i) for i, p in enumerate(files)]
    with ThreadPoolExecutor(max(1, threads)) as pool:
        items = list(pool.map(lambda j: _load_item(*j), jobs))
    return np.stack(items)


def _model_from_checkpoint(path, rc: RunConfig | None):
    try:
        manifest, _ = read_manifest(path)
        cfg = mm.ModelConfig.from_dict(manifest["config"]["model"])
    except CheckpointError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: manifest lacks a usable model config ({exc})") from exc
    if rc is not None and rc.values["model"]:
        wanted = rc.model_config().replace(input_mean=cfg.input_mean, input_std=cfg.input_std)
        if wanted != cfg:
            raise UsageError(f"checkpoint {path} was trained with a different model config "
                             f"(d_model {cfg.d_model}, layers {cfg.enc_layers}) than requested "
                             f"(d_model {wanted.d_model}, layers {wanted.enc_layers})")
    ck = load_checkpoint(path, mm.param_shapes(cfg))
    return cfg, ck.params


# ----------------------------------------------------------------- commands


def cmd_pretrain(args) -> int:
    rc = _config(args)
    for key in ("preset", "d_model", "enc_layers", "d_dec"):
        rc.set("model", key, getattr(args, key.replace("d_dec", "dec_dim"), None))
    if args.rope_encoder:
        rc.set("model", "rope_encoder", True)
    if args.rope_decoder:
        rc.set("model", "rope_decoder", True)
    rc.set("optim", "steps", args.steps)
    rc.set("optim", "peak_lr", args.lr)
    rc.set("optim", "batch_size", args.batch_size)
    rc.set("optim", "warmup_epochs", args.warmup_epochs)
    rc.set("optim", "checkpoint_every", args.checkpoint_every)
    if args.fixed_masks:
        rc.set("optim", "fixed_masks", True)
    rc.set("paths", "data", args.data)
    cfg = rc.model_config()
    seed = rc.seed

    enc = mm.param_count(cfg, "encoder")
    full = mm.param_count(cfg, "full")
    print(f"encoder params: {enc:,} ({enc / 1e6:.1f}M); full model {full:,} ({full / 1e6:.1f}M)")
    preset = rc.get("model", "preset", "desk")
    ref = mm.REFERENCE_ENCODER_PARAMS.get(preset)
    if ref is not None and abs(enc - ref) / ref > 0.015:
        print(f"warning: {preset} encoder has {enc / 1e6:.2f}M params, "
              f"more than 1.5% away from the reference {ref / 1e6:.1f}M", file=sys.stderr)

    data_dir = rc.get("paths", "data")
    if data_dir is None:
        raise UsageError("no dataset given (--data DIR or [paths] data)")
    data = load_dataset(data_dir, cfg, seed, rc.get("run", "threads", 1))
    out = _out_dir(rc, args)

    o = rc.values["optim"]
    bs = min(o.get("batch_size", 1024), len(data))
    spe = max(1, len(data) // bs)
    steps = o.get("steps")
    epochs = o.get("epochs") or (math.ceil(steps / spe) if steps else 100)
    warmup = o.get("warmup_epochs", epochs // 10)
    oc = OptimConfig(peak_lr=o.get("peak_lr"), weight_decay=o.get("weight_decay", 0.05),
                     beta1=o.get("beta1", 0.9), beta2=o.get("beta2", 0.95), eps=o.get("eps", 1e-8),
                     batch_size=bs, epochs=epochs, warmup_epochs=warmup, steps_per_epoch=spe)
    steps = steps or oc.total_steps
    rc.record_model(cfg)
    rc.record_optim(oc, steps=steps, checkpoint_every=o.get("checkpoint_every", 0),
                    fixed_masks=o.get("fixed_masks", False))
    rc.write(out / "config.ini")
    result = pretrain(data, cfg, oc, seed=seed, checkpoint_dir=out / "checkpoints",
                      steps=steps, checkpoint_every=o.get("checkpoint_every", 0),
                      fixed_masks=o.get("fixed_masks", False), resume=args.resume,
                      log_path=out / "train_log.csv")
    rc.record_model(result.model_config)
    rc.write(out / "config.ini")
    if result.losses:
        print(f"steps {len(result.losses)}  initial loss {result.losses[0]:.4f}  "
              f"final loss {result.losses[-1]:.4f}")
    print(f"checkpoint: {out / 'checkpoints' / 'last.ampp'}")
    return 0


def cmd_extract(args) -> int:
    rc = _config(args)
    if args.preset:
        rc.set("model", "preset", args.preset)
    cfg, params = _model_from_checkpoint(args.checkpoint, rc)
    wav_dir = Path(args.wavs)
    if not wav_dir.is_dir():
        raise UsageError(f"wav directory not found: {wav_dir}")
    files = sorted(wav_dir.glob("*.wav"))
    if not files:
        raise UsageError(f"no .wav files in {wav_dir}")
    out = _out_dir(rc, args)
    threads = rc.get("run", "threads", 1)
    extractor = evalkit.FeatureExtractor(params, cfg, threads=threads)
    with ThreadPoolExecutor(max(1, threads)) as pool:
        waves = list(pool.map(load_wav, files))
    feats = extractor.many(waves)
    path = out / "features.bin"
    write_matrix(path, feats)
    path.with_suffix(".ids").write_text("".join(f"{f.stem}\n" for f in files), encoding="utf-8")
    rc.set("paths", "data", str(wav_dir))
    rc.set("paths", "checkpoint", str(args.checkpoint))
    rc.record_model(cfg)
    rc.write(out / "config.ini")
    print(f"features {feats.shape[0]} x {feats.shape[1]} -> {path}")
    return 0


def read_labels(path):
    """``id,label[,split]``; multi-label cells separate labels with ';'."""
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
    except OSError as exc:
        raise UsageError(f"cannot read labels {path}: {exc}") from exc
    if not rows or "id" not in rows[0] or "label" not in rows[0]:
        raise UsageError(f"{path}: expected a header with 'id' and 'label' columns")
    out = {}
    for i, r in enumerate(rows, start=2):
        if not r.get("id") or r.get("label") in (None, ""):
            raise UsageError(f"{path}: line {i} is missing an id or label")
        out[r["id"]] = (r["label"].split(";"), r.get("split") or None)
    return out


def cmd_probe(args) -> int:
    rc = _config(args)
    feats = read_matrix(args.features)
    ids_path = Path(args.features).with_suffix(".ids")
    if not ids_path.exists():
        raise UsageError(f"missing id sidecar {ids_path}")
    ids = ids_path.read_text(encoding="utf-8").split()
    if len(ids) != feats.shape[0]:
        raise UsageError(f"{ids_path}: {len(ids)} ids for {feats.shape[0]} feature rows")
    labels = read_labels(args.labels)
    missing = [i for i in ids if i not in labels]
    if missing:
        raise UsageError(f"{args.labels}: no label for clip {missing[0]!r}")
    names = sorted({lab for i in ids for lab in labels[i][0]})
    index = {n: k for k, n in enumerate(names)}
    multilabel = args.metric == "mAP" or any(len(labels[i][0]) > 1 for i in ids)
    if multilabel:
        y = np.zeros((len(ids), len(names)))
        for r, i in enumerate(ids):
            y[r, [index[lab] for lab in labels[i][0]]] = 1
    else:
        y = np.array([index[labels[i][0][0]] for i in ids])
    splits = [labels[i][1] for i in ids]
    seeds = rc.get("probe", "seeds", args.seeds)
    scores = []
    for k in range(seeds):
        seed = rc.seed + k
        if all(s is not None for s in splits):
            test = np.array([s == "test" for s in splits])
        else:
            test = _test_mask(y if not multilabel else y.argmax(1), args.test_fraction, seed)
        if test.all() or not test.any():
            raise UsageError("probe needs a non-empty train split and a non-empty test split")
        pc = rc.probe_config(seed)
        if multilabel:
            pc = evalkit.ProbeConfig(**{**pc.__dict__, "loss_mode": "bce"})
        probe = evalkit.train_probe(feats[~test], y[~test], pc, n_classes=len(names))
        scores.append(evalkit.eval_probe(probe, feats[test], y[test], "mAP" if multilabel else "accuracy"))
    value = float(np.mean(scores))
    out = _out_dir(rc, args)
    pc = rc.probe_config(rc.seed)
    rc.values["probe"].update(hidden=pc.hidden, epochs=pc.epochs, loss_mode=pc.loss_mode, seeds=seeds,
                              lr_grid=" ".join(str(v) for v in pc.lr_grid))
    rc.set("paths", "data", str(args.features))
    metrics = out / "metrics.csv"
    new = not metrics.exists()
    with open(metrics, "a", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(["model", "task", "metric_value"])
        w.writerow([args.model_name, args.task, f"{value:.6f}"])
    rc.write(out / "config.ini")
    print(f"{args.model_name},{args.task},{value:.6f}")
    return 0


def _test_mask(y, frac, seed):
    rng = np.random.default_rng([seed, 5])
    test = np.zeros(len(y), dtype=bool)
    for c in np.unique(y):
        idx = rng.permutation(np.flatnonzero(y == c))
        n_test = int(np.floor(frac * idx.size + 0.5))
        if idx.size >= 2:
            n_test = min(max(n_test, 1), idx.size - 1)
        test[idx[:n_test]] = True
    return test


def cmd_score(args) -> int:
    try:
        with open(args.metrics, newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
        triples = [(r["model"], r["task"], float(r["metric_value"])) for r in rows]
    except (OSError, KeyError, TypeError, ValueError) as exc:
        raise UsageError(f"cannot parse metrics CSV {args.metrics}: {exc}") from exc
    scores = evalkit.aggregate_score(evalkit.ScoreTable.from_rows(triples))
    rc = _config(args)
    out = _out_dir(rc, args)
    with open(out / "scores.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["model", "s_m"])
        for m, s in scores.items():
            w.writerow([m, f"{s:.4f}"])
            print(f"{m},{s:.4f}")
    return 0


def cmd_verify(args) -> int:
    checks = verify.run_all(tolerance=args.tolerance, seed=args.seed or 0)
    print(verify.format_table(checks))
    ok = all(c.passed for c in checks)
    print("ALL PASS" if ok else f"{sum(not c.passed for c in checks)} check(s) FAILED")
    return 0 if ok else 1


def cmd_synth(args) -> int:
    out = Path(args.out)
    seed = args.seed if args.seed is not None else 0
    if args.kind == "toy":
        synthetic.write_toyset(out, seed)
    else:
        synthetic.write_task(synthetic.TASKS[args.kind](n_per_class=args.n_per_class, seed=seed), out)
    print(f"wrote {args.kind} data to {out}")
    return 0


# ------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="audiomaepp", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, out=True):
        p.add_argument("--config", help="INI run config; flags override its values")
        p.add_argument("--seed", type=int, help="random seed (fallback: $AMPP_SEED, then 0)")
        p.add_argument("--threads", type=int, help="worker threads for loading/extraction")
        if out:
            p.add_argument("--out", help="run directory for all outputs")

    p = sub.add_parser("pretrain", help="masked-reconstruction pretraining")
    common(p)
    p.add_argument("--preset", choices=sorted(mm.PRESETS))
    p.add_argument("--d-model", type=int)
    p.add_argument("--enc-layers", type=int)
    p.add_argument("--dec-dim", type=int, help="decoder width (384, 512, 768 in the ablation)")
    p.add_argument("--rope-encoder", action="store_true")
    p.add_argument("--rope-decoder", action="store_true")
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float, help="peak learning rate")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--warmup-epochs", type=int)
    p.add_argument("--checkpoint-every", type=int)
    p.add_argument("--fixed-masks", action="store_true", help="one fixed mask per clip")
    p.add_argument("--data")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("extract", help="frozen encoder features for a directory of WAVs")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--wavs", required=True)
    p.add_argument("--preset", choices=sorted(mm.PRESETS), help="expected model preset")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("probe", help="train/evaluate an MLP probe on extracted features")
    common(p)
    p.add_argument("--features", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--task", required=True)
    p.add_argument("--model-name", required=True)
    p.add_argument("--metric", choices=["accuracy", "mAP"], default="accuracy")
    p.add_argument("--seeds", type=int, default=1, help="repeat over this many seeds and average")
    p.add_argument("--test-fraction", type=float, default=0.25)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("score", help="aggregated normalized score s(m)")
    common(p)
    p.add_argument("--metrics", required=True)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("verify", help="run the invariant suite")
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("synth", help="write bundled synthetic audio")
    p.add_argument("--kind", choices=["toy", *synthetic.TASKS], required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--n-per-class", type=int, default=20)
    p.set_defaults(func=cmd_synth)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, CheckpointError, AudioFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
