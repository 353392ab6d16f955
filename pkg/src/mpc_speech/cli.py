"""Command-line entry point: ``mpc-speech <subcommand> [flags]``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Sequence

from .decoding import EvalReport, decode
from .features import (ManifestEntry, featurize_manifest, read_feature_archive, read_manifest,
                       write_feature_archive, write_speaker_stats)
from .model import Vocab, init_asr_model, init_finetune_model, load_checkpoint, save_checkpoint
from .numerics import Rng
from .objectives import sample_mask_plan
from .training import (LabeledUtterance, RunConfig, finetune, is_validation, load_config, lr_at_step,
                       pretrain)

log = logging.getLogger("mpc_speech")


class CliError(Exception):
    pass


def _config(args) -> RunConfig:
    if getattr(args, "config", None):
        try:
            cfg = load_config(args.config)
        except OSError as exc:
            raise CliError(f"{args.config}: cannot read config: {exc.strerror or exc}") from exc
    else:
        cfg = RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "profile", None):
        cfg.profile = args.profile
    return cfg


def _manifest(path) -> list[ManifestEntry]:
    if not path:
        raise CliError("a manifest is required (--manifest or the config's train_manifest)")
    try:
        return read_manifest(path)
    except OSError as exc:
        raise CliError(f"{path}: cannot read manifest: {exc.strerror or exc}") from exc


def _features(path, entries: Sequence[ManifestEntry] | None = None):
    if not path:
        raise CliError("a feature archive is required (--features or the config's features)")
    speakers = {e.utterance_id: e.speaker_id for e in entries} if entries else None
    try:
        return read_feature_archive(path, speakers)
    except OSError as exc:
        raise CliError(f"{path}: cannot read feature archive: {exc.strerror or exc}") from exc


def _checkpoint(path):
    if not path:
        raise CliError("--checkpoint is required")
    try:
        return load_checkpoint(path)
    except OSError as exc:
        raise CliError(f"{path}: cannot read checkpoint: {exc.strerror or exc}") from exc


def _labelled(entries: Sequence[ManifestEntry], feats) -> list[LabeledUtterance]:
    by_id = {f.utterance_id: f for f in feats}
    out = []
    for e in entries:
        if e.utterance_id not in by_id:
            raise CliError(f"utterance {e.utterance_id} is in the manifest but not in the feature archive")
        out.append(LabeledUtterance(by_id[e.utterance_id], e.transcript))
    return out


# ---------------------------------------------------------------------------
# subcommands


def cmd_featurize(args) -> int:
    entries = _manifest(args.manifest)
    if not args.out:
        raise CliError("--out is required")
    try:
        seqs, stats = featurize_manifest(entries)
    except OSError as exc:
        raise CliError(f"{exc.filename}: {exc.strerror or exc}") from exc
    write_feature_archive(args.out, seqs)
    write_speaker_stats(f"{args.out}.stats", stats)
    print(f"wrote {len(seqs)} utterances to {args.out}")
    return 0


def cmd_pretrain(args) -> int:
    cfg = _config(args)
    entries = _manifest(args.manifest or cfg.train_manifest) if (args.manifest or cfg.train_manifest) else None
    feats = _features(args.features or cfg.features, entries)
    out = args.out or cfg.out or "."
    res = pretrain(cfg, feats, out_dir=out)
    save_checkpoint(Path(out) / "pretrain_final.mpck", res.params)
    for line in res.metrics:
        print(line)
    return 0


def cmd_finetune(args) -> int:
    cfg = _config(args)
    entries = _manifest(args.manifest or cfg.train_manifest)
    feats = _features(args.features or cfg.features, entries)
    labelled = _labelled(entries, feats)
    if cfg.valid_manifest:
        valid = _labelled(_manifest(cfg.valid_manifest), feats)
        train = labelled
    else:
        valid = [u for u in labelled if is_validation(u.features.utterance_id, cfg.val_fraction)]
        train = [u for u in labelled if not is_validation(u.features.utterance_id, cfg.val_fraction)]
    vocab = Vocab.from_texts(u.text for u in labelled)
    enc, dec = cfg.model_configs()
    rng = Rng(cfg.seed).substream("finetune-init")
    if args.checkpoint:
        init = init_finetune_model(_checkpoint(args.checkpoint), enc, dec, vocab, rng)
    else:
        init = init_asr_model(enc, dec, vocab, rng)
    res = finetune(cfg, init, train, valid)
    out = Path(args.out or cfg.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / "finetune_best.mpck", res.params)
    (out / "finetune_metrics.log").write_text("\n".join(res.metrics) + "\n", encoding="utf-8")
    for line in res.metrics:
        print(line)
    print(f"best epoch {res.best_epoch}")
    return 0


def _read_hypotheses(path) -> dict[str, str]:
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise CliError(f"{path}: cannot read hypotheses: {exc.strerror or exc}") from exc
    hyps = {}
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        uid, sep, text = line.partition("\t")
        if not sep:
            raise CliError(f"{path}:{lineno}: expected 'utterance_id<TAB>hypothesis'")
        hyps[uid] = text
    return hyps


def cmd_evaluate(args) -> int:
    entries = _manifest(args.manifest)
    report = EvalReport()
    if args.hypotheses:
        hyps = _read_hypotheses(args.hypotheses)
        for e in entries:
            if e.utterance_id not in hyps:
                raise CliError(f"{args.hypotheses}: no hypothesis for {e.utterance_id}")
            report.add(e.utterance_id, e.transcript, hyps[e.utterance_id])
    else:
        params = _checkpoint(args.checkpoint)
        for u in _labelled(entries, _features(args.features, entries)):
            hyp = decode(params, u.features.frames, beam_width=args.beam, ctc_weight=args.ctc_weight)
            report.add(u.features.utterance_id, u.text, hyp.text)
    if args.out:
        Path(args.out).write_text(report.to_tsv(), encoding="utf-8")
    else:
        sys.stdout.write(report.to_tsv())
    print(report.summary())
    return 0


def cmd_inspect_masks(args) -> int:
    cfg = _config(args)
    policy = cfg.mask_policy()
    root = Rng(cfg.seed).substream("inspect-masks")
    for i in range(args.count):
        plan = sample_mask_plan(args.T, policy, root.substream(i))
        print(f"# plan {i} T={args.T} selected={int(plan.selected.sum())}")
        print(plan.describe())
    return 0


def cmd_lr_table(args) -> int:
    cfg = _config(args)
    enc, _ = cfg.model_configs()
    sched = cfg.schedule(enc.d_model)
    try:
        steps = [int(s) for s in args.steps.split(",") if s.strip()]
    except ValueError as exc:
        raise CliError(f"--steps must be a comma-separated list of integers: {exc}") from exc
    for n in steps:
        print(f"{n}\t{lr_at_step(n, sched):.10e}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mpc-speech", description="Masked predictive coding for speech.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=False, profile_default=None):
        p.add_argument("--config", required=config_required, help="flat 'key = value' run configuration")
        p.add_argument("--seed", type=int, help="override the configured seed")
        p.add_argument("--profile", choices=("toy", "paper"), default=profile_default)

    p = sub.add_parser("featurize", help="manifest -> FBANK feature archive")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_featurize)

    for name, func in (("pretrain", cmd_pretrain), ("finetune", cmd_finetune)):
        p = sub.add_parser(name, help=f"{name} from a feature archive")
        common(p, config_required=True)
        p.add_argument("--manifest")
        p.add_argument("--features")
        p.add_argument("--out")
        if name == "finetune":
            p.add_argument("--checkpoint", help="pre-trained encoder; random init when omitted")
        p.set_defaults(func=func)

    p = sub.add_parser("evaluate", help="decode and score CER")
    p.add_argument("--manifest", required=True)
    p.add_argument("--features")
    p.add_argument("--checkpoint")
    p.add_argument("--hypotheses", help="score an 'id<TAB>hyp' file instead of decoding")
    p.add_argument("--beam", type=int, default=10)
    p.add_argument("--ctc-weight", type=float, default=0.3)
    p.add_argument("--out", help="write the per-utterance TSV here")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("inspect-masks", help="dump sampled mask plans")
    common(p)
    p.add_argument("--T", type=int, required=True, help="sequence length in stacked positions")
    p.add_argument("--count", type=int, default=1)
    p.set_defaults(func=cmd_inspect_masks)

    p = sub.add_parser("lr-table", help="print the learning rate at given steps")
    common(p, profile_default="paper")
    p.add_argument("--steps", required=True, help="comma-separated step numbers")
    p.set_defaults(func=cmd_lr_table)
    return parser


def run_cli(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with status 2 and usage text on bad input
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CliError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run_cli())
