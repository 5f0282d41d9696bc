"""Command-line surface tying the pipeline together.

Commands: synth, extract, stats, split, train, eval, predict.
Exit codes: 0 success, 1 usage, 2 data error, 3 numeric failure.

Commands read an optional key=value config file; explicit flags win over
config values. All randomness is funneled through --seed.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import dataclasses
import sys
from pathlib import Path

from . import dataset, features, metrics, synth, training
from .errors import DataError, NumericError
from .featfile import load_features, save_features
from .model import ModelConfig, load_checkpoint, predict_mos

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse default exits with 2; we reserve that
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _read_config(path: str | None) -> dict[str, str]:
    if not path:
        return {}
    cfg: dict[str, str] = {}
    text = Path(path).read_text(encoding="utf-8")
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise DataError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, _, value = stripped.partition("=")
        cfg[key.strip()] = value.strip()
    return cfg


def _coerce(value: str, to_type):
    if to_type is bool:
        if value.lower() in ("1", "true", "yes"):
            return True
        if value.lower() in ("0", "false", "no"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    return to_type(value)


def _dataclass_from_config(cls, cfg: dict[str, str], used: set[str], **overrides):
    kwargs = dict(overrides)
    fields = {f.name: f for f in dataclasses.fields(cls)}
    for key, value in cfg.items():
        if key not in fields:
            continue
        used.add(key)
        base = fields[key].type
        to_type = {"int": int, "float": float, "bool": bool, "int | None": int}.get(base, str)
        try:
            kwargs.setdefault(key, _coerce(value, to_type))
        except ValueError as exc:
            raise DataError(f"config key {key!r}: {exc}") from None
    return cls(**kwargs)


def _mfcc_config(cfg: dict[str, str], used: set[str]) -> features.MfccConfig:
    return _dataclass_from_config(features.MfccConfig, cfg, used)


def _check_unknown_keys(cfg: dict[str, str], used: set[str]) -> None:
    known = used | {f.name for cls in (training.TrainConfig, ModelConfig, features.MfccConfig)
                    for f in dataclasses.fields(cls)}
    unknown = sorted(set(cfg) - known)
    if unknown:
        raise DataError(f"unknown config keys: {', '.join(unknown)}")


def cmd_synth(args) -> int:
    spec = synth.SynthSpec(
        n_clips=args.n_clips,
        duration_s=args.duration,
        snr_low_db=args.snr_low,
        snr_high_db=args.snr_high,
        seed=args.seed,
    )
    manifest = synth.generate_corpus(spec, args.out)
    print(f"wrote {len(manifest)} clips and manifest to {args.out}")
    return EXIT_OK


def _extract_one(rec, kind: str, out_dir: Path, mfcc_cfg) -> tuple[str, Path]:
    if kind == "mfcc":
        wave = features.load_waveform(rec.source, expect_rate=mfcc_cfg.sample_rate)
        fm = features.compute_mfcc(wave, mfcc_cfg)
        out_path = out_dir / f"{rec.id}.mosf"
        save_features(fm, out_path)
        return rec.id, out_path
    # import: validate an existing feature file, reference it in place
    load_features(rec.source)
    return rec.id, Path(rec.source)


def cmd_extract(args) -> int:
    manifest = dataset.load_manifest(args.manifest)
    cfg = _read_config(args.config)
    used: set[str] = set()
    mfcc_cfg = _mfcc_config(cfg, used)
    _check_unknown_keys(cfg, used)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    results: dict[str, Path] = {}
    def run(rec):
        try:
            return _extract_one(rec, args.kind, out_dir, mfcc_cfg)
        except DataError as exc:
            raise DataError(f"clip {rec.id!r}: {exc}") from None

    if args.jobs > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=args.jobs) as pool:
            for clip_id, path in pool.map(run, manifest):
                results[clip_id] = path
    else:
        for rec in manifest:
            clip_id, path = run(rec)
            results[clip_id] = path

    out_records = [
        dataclasses.replace(rec, source=results[rec.id]) for rec in manifest
    ]
    out_manifest = dataset.Manifest(out_records)
    out_path = out_dir / "features.csv"
    dataset.save_manifest(out_manifest, out_path)
    print(f"wrote {len(out_manifest)} feature entries to {out_path}")
    return EXIT_OK


def cmd_stats(args) -> int:
    manifest = dataset.load_manifest(args.manifest)
    if args.split:
        ids = sorted(dataset.load_split(args.split).train)
    else:
        ids = manifest.ids()
    source = training.ManifestFeatureSource(manifest)
    stats = features.compute_norm_stats(source.load(i) for i in ids)
    features.save_norm_stats(stats, args.out)
    print(f"wrote per-channel stats ({stats.channels} channels) to {args.out}")
    return EXIT_OK


def cmd_split(args) -> int:
    manifest = dataset.load_manifest(args.manifest)
    if args.strategy == "all":
        split = dataset.split_all_corpora(manifest, args.seed)
    elif args.strategy == "subset":
        corpora = {dataset.Corpus(c) for c in args.corpora.split(",")}
        split = dataset.restrict_split(
            manifest, dataset.split_all_corpora(manifest, args.seed), corpora
        )
    else:
        split = dataset.split_challenge_original(manifest, args.seed)
    dataset.save_split(split, args.out)
    print(
        f"strategy={split.strategy.value} train={len(split.train)} "
        f"val={len(split.val)} -> {args.out}"
    )
    return EXIT_OK


def cmd_train(args) -> int:
    manifest = dataset.load_manifest(args.manifest)
    split = dataset.load_split(args.split)
    cfg = _read_config(args.config)
    used: set[str] = set()
    train_cfg = _dataclass_from_config(training.TrainConfig, cfg, used, seed=args.seed)
    probe = training.ManifestFeatureSource(manifest)
    channels = probe.load(next(iter(sorted(split.train)))).channels
    model_cfg = _dataclass_from_config(ModelConfig, cfg, used, input_channels=channels)
    _check_unknown_keys(cfg, used)

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    log_path = out_dir / "train.log"
    with open(log_path, "w", encoding="utf-8") as log_fh:
        report = training.train(
            manifest, split, probe, model_cfg, train_cfg, out_dir,
            log=lambda line: print(line, file=log_fh),
        )
    lines = [
        f"epoch={e + 1} train_loss={tr:.6g} val_loss={vl:.6g}"
        for e, (tr, vl) in enumerate(zip(report.train_losses, report.val_losses))
    ]
    lines.append(f"best_epoch={report.best_epoch + 1}")
    lines.append(f"checkpoint={report.checkpoint_path}")
    (out_dir / "report.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"best epoch {report.best_epoch + 1}, checkpoint at {report.checkpoint_path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    manifest = dataset.load_manifest(args.manifest)
    if args.split:
        split = dataset.load_split(args.split)
        ids = {"train": split.train, "val": split.val,
               "all": split.train | split.val}[args.part]
    else:
        ids = set(manifest.ids())
    source = training.ManifestFeatureSource(manifest)
    reports = training.evaluate(args.checkpoint, manifest, ids, source)
    print(metrics.render_table(reports))
    if args.out:
        metrics.write_delimited(reports, args.out)
        print(f"wrote report to {args.out}")
    return EXIT_OK


def cmd_predict(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    path = Path(args.audio)
    if path.suffix == ".mosf":
        fm = load_features(path)
    else:
        cfg = _read_config(args.config)
        used: set[str] = set()
        mfcc_cfg = _mfcc_config(cfg, used)
        wave = features.load_waveform(path, expect_rate=mfcc_cfg.sample_rate)
        fm = features.compute_mfcc(wave, mfcc_cfg)
    mos = predict_mos(ckpt.params, fm, ckpt.norm_stats)
    print(f"{mos:.3f}")
    return EXIT_OK


def build_parser() -> _Parser:
    parser = _Parser(prog="moskit", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic labeled corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--n-clips", type=int, default=100)
    p.add_argument("--duration", type=float, default=2.0)
    p.add_argument("--snr-low", type=float, default=-5.0)
    p.add_argument("--snr-high", type=float, default=25.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("extract", help="extract MFCCs or import feature files")
    p.add_argument("--manifest", required=True)
    p.add_argument("--kind", choices=("mfcc", "import"), default="mfcc")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("stats", help="per-channel normalization statistics")
    p.add_argument("--manifest", required=True, help="feature manifest")
    p.add_argument("--split", help="split directory; stats use its train side")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("split", help="train/validation division")
    p.add_argument("--manifest", required=True)
    p.add_argument("--strategy", choices=("all", "subset", "challenge"), default="all")
    p.add_argument("--corpora", default="Tencent,PSTN",
                   help="comma-separated corpus tags for --strategy subset")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="train the regressor on a feature manifest")
    p.add_argument("--manifest", required=True, help="feature manifest")
    p.add_argument("--split", required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="metric report for a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True, help="feature manifest")
    p.add_argument("--split")
    p.add_argument("--part", choices=("train", "val", "all"), default="val")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="MOS for one clip (WAV or .mosf)")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config")
    p.add_argument("audio")
    p.set_defaults(func=cmd_predict)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    try:
        return args.func(args)
    except NumericError as exc:
        print(f"moskit: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, OSError, KeyError, ValueError) as exc:
        print(f"moskit: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
