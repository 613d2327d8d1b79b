"""Command-line surface.

Commands: prepare, stats, train, eval, tag, import-weights,
augment-preview, serve. Exit codes: 0 success, 1 configuration error,
2 data error, 3 numeric failure.

``tag`` can run against a live service (``--server URL``) as a thin
client; everything else executes in-process.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .audio import Waveform, read_wav, resample, wav_info, write_wav, PIPELINE_RATE
from .augment import add_noise, derive_rng, freq_mask, time_mask
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint, write_raw_tensor
from .config import RunConfig, load_run_config
from .dataset import (
    LABELS,
    Label,
    ManifestRecord,
    Scheme,
    Source,
    SplitSpec,
    compose_scheme,
    load_manifest,
    load_segments,
    parse_label,
    save_manifest,
    split,
    synthesize_white_noise,
)
from .errors import ConfigError, CribtagError, DataError, ManifestError, NumericError
from .frontend import FrontendConfig, NormStats, compute_stats, log_mel, normalize
from .metrics import DecisionMode, emit_report, evaluate, report_to_dict
from .model import AstClassifier
from .service import record_digest
from .tagging import tag_waveform
from .train import TrainConfig, fit, split_validation
from .weight_import import import_raw_tensors

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems through the config-error path."""

    def error(self, message):
        raise ConfigError(message)


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="TOML run configuration")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override a config value (repeatable)")
    p.add_argument("--seed", type=int, default=None, help="global seed (beats config and CRIBTAG_SEED)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cribtag", description="Sound-event tagging for infant-centric home audio")
    parser.add_argument("--version", action="version", version=f"cribtag {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="convert interval label files + WAVs into a JSONL manifest")
    p.add_argument("--labels", required=True, help="directory of <stem>.txt files: onset<TAB>offset<TAB>label")
    p.add_argument("--wavs", required=True, help="directory of <stem>.wav files")
    p.add_argument("--out", required=True, help="output manifest path")
    p.add_argument("--source", default="LB_HOME", choices=[s.value for s in Source])
    p.add_argument("--family-id", default=None, help="constant family id (default: file stem)")

    p = sub.add_parser("stats", help="compute spectrogram normalization stats for a manifest")
    _add_config_args(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="output JSON path")
    p.add_argument("--threads", type=int, default=None)

    p = sub.add_parser("train", help="compose a training scheme, fit, and evaluate on the test split")
    _add_config_args(p)
    p.add_argument("--scheme", choices=[s.value for s in Scheme], default=None)
    p.add_argument("--freeze", choices=["whole_model", "last_two_layers"], default=None)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--init", default=None, help="checkpoint to start from instead of scratch weights")
    p.add_argument("--init-subset", action="store_true",
                   help="allow --init to carry only a subset of parameters")

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--mode", choices=["single_label", "multi_label"], default=None,
                   help="default: single_label when every record has one label")
    p.add_argument("--allow-train-eval", action="store_true")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--stats", default=None, help="stats JSON (overrides checkpoint norm_stats)")

    p = sub.add_parser("tag", help="tag a long recording with sliding 4 s windows")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--wav", required=True)
    p.add_argument("--hop-s", type=float, default=4.0)
    p.add_argument("--out", default=None, help="output JSONL (default: stdout)")
    p.add_argument("--server", default=None, help="tag via a running service instead of in-process")
    p.add_argument("--stats", default=None, help="stats JSON (overrides checkpoint norm_stats)")

    p = sub.add_parser("import-weights", help="convert raw tensor files into a native checkpoint")
    _add_config_args(p)
    p.add_argument("--dir", required=True, help="directory of *.tensor files")
    p.add_argument("--out", required=True, help="output checkpoint path")
    p.add_argument("--stats", default=None, help="stats JSON to embed for serving")

    p = sub.add_parser("augment-preview", help="dump pre/post augmentation spectrograms")
    _add_config_args(p)
    p.add_argument("--wav", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--binary", action="store_true", help="also write .tensor files")

    p = sub.add_parser("serve", help="run the tagging/evaluation HTTP service")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)

    return parser


# ---------------------------------------------------------------------------
# prepare


def _parse_interval_file(path: Path) -> list:
    intervals = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ManifestError(f"{path}:{lineno}: expected onset<TAB>offset<TAB>label, got {line!r}")
            try:
                onset, offset = float(parts[0]), float(parts[1])
            except ValueError:
                raise ManifestError(f"{path}:{lineno}: non-numeric interval bounds") from None
            labels = frozenset(parse_label(tok.strip()) for tok in parts[2].split(",") if tok.strip())
            if not labels:
                raise ManifestError(f"{path}:{lineno}: empty label field")
            intervals.append((onset, offset, labels))
    return intervals


def cmd_prepare(args) -> int:
    labels_dir, wavs_dir = Path(args.labels), Path(args.wavs)
    if not labels_dir.is_dir() or not wavs_dir.is_dir():
        raise DataError(f"label/wav directories must exist: {labels_dir}, {wavs_dir}")
    records = []
    orphans = []
    label_files = sorted(labels_dir.glob("*.txt"))
    for lf in label_files:
        wav_path = wavs_dir / (lf.stem + ".wav")
        if not wav_path.exists():
            orphans.append(lf.name)
            continue
        duration = wav_info(wav_path).duration_s
        family = args.family_id or lf.stem
        for lineno_offset, (onset, offset, labels) in enumerate(_parse_interval_file(lf)):
            if offset > duration + 1e-6:
                raise ManifestError(f"{lf}: interval [{onset}, {offset}] beyond audio duration {duration:.3f}s")
            records.append(
                ManifestRecord(
                    path=str(wav_path.resolve()),
                    onset_s=onset,
                    offset_s=offset,
                    labels=labels,
                    family_id=family,
                    source=Source(args.source),
                )
            )
    for name in orphans:
        log.warning("prepare: no matching WAV for %s, skipped", name)
    records.sort(key=lambda r: (r.path, r.onset_s))
    save_manifest(args.out, records)
    if not records:
        log.warning("prepare: wrote an empty manifest")

    minutes = {lab: 0.0 for lab in LABELS}
    for rec in records:
        for lab in rec.labels:
            minutes[lab] += rec.duration_s / 60.0
    print(f"manifest: {args.out} ({len(records)} records)")
    print(f"{'class':<22} {'minutes':>8}")
    for lab in LABELS:
        print(f"{lab.value:<22} {minutes[lab]:>8.2f}")
    if orphans:
        print(f"skipped label files with no WAV: {', '.join(orphans)}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# stats


def _stats_for_manifest(manifest: str, rc: RunConfig, threads: int) -> tuple:
    records = load_manifest(manifest)
    segments = load_segments(records, threads=threads)
    if not segments:
        raise DataError(f"{manifest}: no usable segments")
    stats = compute_stats(log_mel(Waveform(s.samples, PIPELINE_RATE), rc.frontend) for s in segments)
    return stats, len(segments)


def cmd_stats(args) -> int:
    rc = load_run_config(args.config, args.overrides, args.seed)
    threads = args.threads if args.threads is not None else rc.data.threads
    stats, n = _stats_for_manifest(args.manifest, rc, threads)
    payload = {"mean": stats.mean, "std": stats.std, "n_segments": n}
    Path(args.out).write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
    print(json.dumps(payload))
    return EXIT_OK


# ---------------------------------------------------------------------------
# train


def _load_stats_file(path: str) -> NormStats:
    try:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
        return NormStats(mean=float(obj["mean"]), std=float(obj["std"]))
    except (OSError, ValueError, KeyError, json.JSONDecodeError) as e:
        raise DataError(f"cannot read stats file {path}: {e}") from None


def _decision_mode(segments) -> DecisionMode:
    single = all(len(s.labels) == 1 for s in segments)
    return DecisionMode.SINGLE_LABEL if single else DecisionMode.MULTI_LABEL


def cmd_train(args) -> int:
    rc = load_run_config(args.config, args.overrides, args.seed)
    tcfg = rc.train
    if args.scheme:
        tcfg = replace_field(tcfg, scheme=Scheme(args.scheme))
    if args.freeze:
        from .train import FreezePolicy

        tcfg = replace_field(tcfg, freeze_policy=FreezePolicy(args.freeze))
    scheme = tcfg.scheme
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    need_public = scheme in (Scheme.PUBLIC, Scheme.MIXED)
    need_lb = scheme in (Scheme.RESAMPLED, Scheme.MIXED)
    if need_public and not rc.data.public_manifest:
        raise ConfigError(f"scheme {scheme.value} requires data.public_manifest")
    if need_lb and not rc.data.lb_manifest:
        raise ConfigError(f"scheme {scheme.value} requires data.lb_manifest")

    public_records = load_manifest(rc.data.public_manifest) if rc.data.public_manifest else []
    lb_records = load_manifest(rc.data.lb_manifest) if rc.data.lb_manifest else []

    split_spec = SplitSpec(seed=tcfg.seed)
    if lb_records:
        lb_train_records, test_records = split(lb_records, split_spec)
        public_pool_records = public_records
    else:
        public_pool_records, test_records = split(public_records, split_spec)
        lb_train_records = []

    threads = rc.data.threads
    public_segments = load_segments(public_pool_records, threads=threads)
    if rc.data.synth_white_noise:
        public_segments.extend(synthesize_white_noise(rc.data.synth_white_noise, seed=tcfg.seed))
    lb_train_segments = load_segments(lb_train_records, threads=threads)
    test_segments = load_segments(test_records, threads=threads)

    train_pool = compose_scheme(
        scheme, public_segments, lb_train_segments, cap=tcfg.resample_cap, seed=tcfg.seed
    )
    train_segments, val_segments = split_validation(train_pool, tcfg.val_fraction, tcfg.seed)
    stats = compute_stats(
        log_mel(Waveform(s.samples, PIPELINE_RATE), rc.frontend) for s in train_segments
    )

    model = AstClassifier.init_scratch(rc.model, seed=tcfg.seed)
    if args.init:
        from .checkpoint import load_weights_into

        init_ckpt = load_checkpoint(args.init)
        load_weights_into(model, init_ckpt, strict=not args.init_subset)

    log.info(
        "training scheme=%s freeze=%s: %d train / %d val / %d test segments",
        scheme.value, tcfg.freeze_policy.value, len(train_segments), len(val_segments), len(test_segments),
    )
    result = fit(
        model,
        train_segments,
        val_segments,
        tcfg,
        stats=stats,
        frontend=rc.frontend,
        augment=rc.augment if rc.augment_enabled else None,
    )

    digests = sorted({record_digest(seg.record.key) for seg in train_pool})
    result.checkpoint.metadata.update(
        {
            "train_record_digests": digests,
            "public_manifest": rc.data.public_manifest,
            "lb_manifest": rc.data.lb_manifest,
        }
    )
    ckpt_path = out_dir / "checkpoint.astc"
    save_checkpoint(ckpt_path, result.checkpoint)

    with open(out_dir / "epochs.jsonl", "w", encoding="utf-8") as f:
        for entry in result.history:
            f.write(json.dumps(entry) + "\n")
    (out_dir / "stats.json").write_text(
        json.dumps({"mean": stats.mean, "std": stats.std}, indent=2) + "\n", encoding="utf-8"
    )

    if test_segments:
        best_model = result.checkpoint.build_model()
        report = evaluate(
            best_model, test_segments, _decision_mode(test_segments), stats=stats, frontend=rc.frontend,
            batch_size=tcfg.batch_size,
        )
        (out_dir / "report.json").write_text(emit_report(report, "json") + "\n", encoding="utf-8")
        (out_dir / "report.txt").write_text(emit_report(report, "text") + "\n", encoding="utf-8")
        print(emit_report(report, "text"))
    else:
        log.warning("no test records; skipping final evaluation")
    print(f"checkpoint: {ckpt_path}")
    return EXIT_OK


def replace_field(cfg: TrainConfig, **kw) -> TrainConfig:
    from dataclasses import replace

    return replace(cfg, **kw)


# ---------------------------------------------------------------------------
# eval


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    if args.stats:
        stats = _load_stats_file(args.stats)
    else:
        ns = ckpt.metadata.get("norm_stats")
        if not ns:
            raise ConfigError("checkpoint has no norm_stats; pass --stats")
        stats = NormStats(mean=ns["mean"], std=ns["std"])
    records = load_manifest(args.manifest)
    train_digests = set(ckpt.metadata.get("train_record_digests", []))
    if train_digests and not args.allow_train_eval:
        overlap = sum(1 for r in records if record_digest(r.key) in train_digests)
        if overlap:
            raise ConfigError(
                f"{overlap} of {len(records)} records were in the training split; "
                "pass --allow-train-eval to evaluate anyway"
            )
    segments = load_segments(records, threads=args.threads)
    model = ckpt.build_model()
    mode = DecisionMode(args.mode) if args.mode else _decision_mode(segments)
    report = evaluate(model, segments, mode, stats=stats)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.json").write_text(emit_report(report, "json") + "\n", encoding="utf-8")
    (out_dir / "report.txt").write_text(emit_report(report, "text") + "\n", encoding="utf-8")
    print(emit_report(report, "text"))
    return EXIT_OK


# ---------------------------------------------------------------------------
# tag


def _tag_via_server(args) -> list:
    import httpx

    url = args.server.rstrip("/") + "/tag"
    with open(args.wav, "rb") as f:
        resp = httpx.post(url, files={"file": (Path(args.wav).name, f, "audio/wav")},
                          params={"hop_s": args.hop_s}, timeout=300.0)
    if resp.status_code != 200:
        raise DataError(f"server returned {resp.status_code}: {resp.text}")
    return resp.json()["windows"]


def cmd_tag(args) -> int:
    if args.server:
        windows = _tag_via_server(args)
    else:
        if not args.checkpoint:
            raise ConfigError("tag needs --checkpoint (or --server)")
        ckpt = load_checkpoint(args.checkpoint)
        if args.stats:
            stats = _load_stats_file(args.stats)
        else:
            ns = ckpt.metadata.get("norm_stats")
            if not ns:
                raise ConfigError("checkpoint has no norm_stats; pass --stats")
            stats = NormStats(mean=ns["mean"], std=ns["std"])
        model = ckpt.build_model()
        windows = tag_waveform(model, read_wav(args.wav), stats, hop_s=args.hop_s)
    lines = "\n".join(json.dumps(w) for w in windows)
    if args.out:
        Path(args.out).write_text(lines + "\n", encoding="utf-8")
        print(f"wrote {len(windows)} windows to {args.out}")
    else:
        print(lines)
    return EXIT_OK


# ---------------------------------------------------------------------------
# import-weights


def cmd_import_weights(args) -> int:
    rc = load_run_config(args.config, args.overrides, args.seed)
    ckpt = import_raw_tensors(args.dir, rc.model, seed=rc.train.seed)
    if args.stats:
        stats = _load_stats_file(args.stats)
        ckpt.metadata["norm_stats"] = {"mean": stats.mean, "std": stats.std}
    save_checkpoint(args.out, ckpt)
    print(f"imported {len(ckpt.metadata['imported_tensors'])} tensors -> {args.out}")
    if ckpt.metadata["scratch_tensors"]:
        print(f"kept scratch init for {len(ckpt.metadata['scratch_tensors'])} parameters")
    return EXIT_OK


# ---------------------------------------------------------------------------
# augment-preview


def _write_csv(path: Path, values: np.ndarray) -> None:
    np.savetxt(path, values, delimiter=",", fmt="%.6f")


def cmd_augment_preview(args) -> int:
    rc = load_run_config(args.config, args.overrides, args.seed)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    w = read_wav(args.wav)
    if w.sample_rate != PIPELINE_RATE:
        w = resample(w, PIPELINE_RATE)
    pre = log_mel(w, rc.frontend)
    rng = derive_rng(rc.augment.seed, 0, 0)
    noisy = add_noise(w, rc.augment.noise_snr_db, rng)
    post = time_mask(freq_mask(log_mel(noisy, rc.frontend), rc.augment, rng), rc.augment, rng)
    _write_csv(out_dir / "pre.csv", pre.values)
    _write_csv(out_dir / "post.csv", post.values)
    if args.binary:
        write_raw_tensor(out_dir / "pre.tensor", "spectrogram", pre.values)
        write_raw_tensor(out_dir / "post.tensor", "spectrogram", post.values)
    print(f"wrote {out_dir / 'pre.csv'} and {out_dir / 'post.csv'} ({pre.values.shape[0]}x{pre.values.shape[1]})")
    return EXIT_OK


# ---------------------------------------------------------------------------
# serve


def cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app

    app = create_app(args.checkpoint)
    uvicorn.run(app, host=args.host, port=args.port, log_level="info")
    return EXIT_OK


_HANDLERS = {
    "prepare": cmd_prepare,
    "stats": cmd_stats,
    "train": cmd_train,
    "eval": cmd_eval,
    "tag": cmd_tag,
    "import-weights": cmd_import_weights,
    "augment-preview": cmd_augment_preview,
    "serve": cmd_serve,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(
            level=logging.DEBUG if args.verbose else logging.INFO,
            format="%(levelname)s %(name)s: %(message)s",
        )
        return _HANDLERS[args.command](args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except CribtagError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
