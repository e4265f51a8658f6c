"""Command-line front end.

Subcommands: ``synth`` (toy corpus), ``train`` (stage 1 or 2), ``infer``
(enrollment-free separation + diarization), ``score`` (der/sdr/cpwer),
``embed-study`` (sampling-variant similarity and purity report), and
``replay`` (re-run a recorded manifest and check bit-identical results).

Every command writes an experiment manifest into its output directory; report
paths render matplotlib figures next to the delimited output. Progress events
go to stderr as line-delimited JSON.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

from . import figures, harness
from .cluster import OracleOverlapDetector
from .config import (
    ConfigError,
    load_config,
    read_manifest,
    sha256_file,
    write_manifest,
)
from .embed import SamplingStrategy, ToyEncoder
from .losses import OslConfig, write_loss_curve
from .metrics import DiarAnnotation, MetricError, cpwer, der, read_rttm, sdr, tokenize, write_rttm
from .mixture import load_mixture
from .network import load_checkpoint, save_checkpoint
from .pipeline import PipelineConfig, PipelineError, run_pipeline
from .signal import SignalError, StftConfig, read_wav, write_wav


def log_event(event: str, **fields) -> None:
    print(json.dumps({"ts": round(time.time(), 3), "event": event, **fields}), file=sys.stderr)


def _stft_from_config(cfg: dict) -> StftConfig:
    return StftConfig(**cfg["stft"])


def _encoder_from_config(cfg: dict, stft_cfg: StftConfig) -> ToyEncoder:
    return ToyEncoder(dim=cfg["encoder"]["dim"], cfg=stft_cfg)


def _strategy(stage_cfg: dict) -> SamplingStrategy:
    return SamplingStrategy(
        stage_cfg["sampling"], overlap_fraction=stage_cfg["overlap_fraction"]
    )


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    cfg = load_config(args.config)
    out_dir = Path(args.out_dir)
    stft_cfg = _stft_from_config(cfg)
    log_event("synth.start", out_dir=str(out_dir), seed=args.seed)
    index_path = harness.build_toy_corpus(cfg["corpus"], stft_cfg, out_dir, seed=args.seed)
    with open(index_path) as f:
        index = json.load(f)
    write_manifest(
        out_dir / "manifest.json",
        command="synth",
        config=cfg,
        seed=args.seed,
        inputs={},
        results={"corpus_hash": index["hash"], "n_mixtures": len(index["mixtures"])},
    )
    log_event("synth.done", corpus_hash=index["hash"])
    print(f"corpus of {len(index['mixtures'])} mixtures at {out_dir}")
    print(f"corpus hash {index['hash']}")
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def _stage_plan(cfg: dict, stage: int, seed: int, init_from: str | None) -> harness.StagePlan:
    if stage == 1:
        s = cfg["stage1"]
        return harness.StagePlan(
            stage="vad",
            sampling=_strategy(s),
            steps=s["steps"],
            lr=s["lr"],
            momentum=s["momentum"],
            seed=seed,
        )
    s = cfg["stage2"]
    return harness.StagePlan(
        stage="sep",
        sampling=_strategy(s),
        steps=s["steps"],
        lr=s["lr"],
        momentum=s["momentum"],
        seed=seed,
        init_from=init_from if init_from is not None else s["init_from"],
        random_init=s["random_init"],
        osl=OslConfig(p=s["osl_p"], epsilon=s["osl_epsilon"], weight=s["osl_weight"]),
    )


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stft_cfg = _stft_from_config(cfg)
    encoder = _encoder_from_config(cfg, stft_cfg)
    plan = _stage_plan(cfg, args.stage, args.seed, args.init_from)

    mixtures, index = harness.load_corpus(args.corpus)
    train_set, _ = harness.split_corpus(mixtures, cfg["corpus"]["holdout_mixtures"])
    log_event("train.start", stage=args.stage, steps=plan.steps, n_mixtures=len(train_set))
    epochs = max(1, -(-plan.steps // len(train_set)))
    log_event(
        "train.sampling",
        variant=plan.sampling.variant,
        draws=harness.planned_variant_counts(plan, train_set, epochs),
    )

    params, curve = harness.run_stage(
        plan, train_set, stft_cfg, encoder, cfg["model"], checkpoint_dir=out_dir / "checkpoints"
    )
    ckpt_path = out_dir / "final.ckpt"
    save_checkpoint(ckpt_path, params, stage=args.stage, seed=args.seed, step=plan.steps)
    curve_csv = out_dir / "loss_curve.csv"
    write_loss_curve(curve_csv, curve)
    figures.save_loss_curve(curve, out_dir / "loss_curve.png", title=f"stage {args.stage} loss")

    inputs = {str(Path(args.corpus) / "corpus.json"): index["hash"]}
    if plan.init_from:
        inputs[str(plan.init_from)] = sha256_file(plan.init_from)
    write_manifest(
        out_dir / "manifest.json",
        command="train",
        config=cfg,
        seed=args.seed,
        inputs=inputs,
        results={
            "final_loss": curve[-1]["loss"],
            "checkpoint_sha256": sha256_file(ckpt_path),
            "stage": args.stage,
        },
        extra={"corpus": str(args.corpus), "init_from": plan.init_from},
    )
    log_event("train.done", final_loss=curve[-1]["loss"])
    print(f"stage {args.stage} trained for {plan.steps} steps, final loss {curve[-1]['loss']:.6f}")
    print(f"checkpoint at {ckpt_path}")
    return 0


# ---------------------------------------------------------------------------
# infer
# ---------------------------------------------------------------------------


def cmd_infer(args) -> int:
    cfg = load_config(args.config)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stft_cfg = _stft_from_config(cfg)
    encoder = _encoder_from_config(cfg, stft_cfg)
    params, ckpt_meta = load_checkpoint(args.ckpt)

    mix = read_wav(args.mix)
    detector = None
    if args.manifest:
        detector = OracleOverlapDetector(load_mixture(args.manifest))
    infer_cfg = cfg["infer"]
    pipe_cfg = PipelineConfig(
        vad_threshold_db=args.vad_threshold_db
        if args.vad_threshold_db is not None
        else infer_cfg["vad_threshold_db"],
        window_s=infer_cfg["window_s"],
        num_speakers=args.num_speakers
        if args.num_speakers is not None
        else infer_cfg["num_speakers"],
        k_max=infer_cfg["k_max"],
        mask_active_threshold=infer_cfg["mask_active_threshold"],
        seed=args.seed,
        stft=stft_cfg,
    )
    log_event("infer.start", mix=str(args.mix), ckpt=str(args.ckpt))
    result = run_pipeline(mix, params, encoder, detector, pipe_cfg)

    wav_paths = []
    for i, w in enumerate(result.separated):
        p = out_dir / f"spk{i}.wav"
        write_wav(p, w)
        wav_paths.append(p)
    hyp_path = out_dir / "hyp.rttm"
    write_rttm(hyp_path, DiarAnnotation(tuple(result.annotation), file_id=Path(args.mix).stem))
    with open(out_dir / "pipeline.json", "w") as f:
        json.dump(result.details, f, indent=2, sort_keys=True)
        f.write("\n")
    if result.masks is not None:
        figures.save_mask_image(result.masks, out_dir / "masks.png")

    inputs = {str(args.mix): sha256_file(args.mix), str(args.ckpt): sha256_file(args.ckpt)}
    if args.manifest:
        inputs[str(args.manifest)] = sha256_file(args.manifest)
    write_manifest(
        out_dir / "manifest.json",
        command="infer",
        config=cfg,
        seed=args.seed,
        inputs=inputs,
        results={
            "k_est": result.details["k_est"],
            "n_windows_kept": len(result.details["windows_kept"]),
            "separated_sha256": {p.name: sha256_file(p) for p in wav_paths},
            "hyp_rttm_sha256": sha256_file(hyp_path),
        },
        extra={
            "mix": str(args.mix),
            "ckpt": str(args.ckpt),
            "mixture_manifest": str(args.manifest) if args.manifest else None,
            "cli_overrides": {
                "vad_threshold_db": args.vad_threshold_db,
                "num_speakers": args.num_speakers,
            },
        },
    )
    log_event("infer.done", k_est=result.details["k_est"])
    print(f"separated {len(wav_paths)} speakers into {out_dir}")
    return 0


# ---------------------------------------------------------------------------
# score
# ---------------------------------------------------------------------------


def _load_transcripts(path) -> dict[str, list[str]]:
    with open(path) as f:
        doc = json.load(f)
    return {spk: tokenize(text) if isinstance(text, str) else list(text) for spk, text in doc.items()}


def cmd_score(args) -> int:
    cfg = load_config(args.config)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    results: dict = {"metric": args.metric}
    inputs = {str(args.ref): sha256_file(args.ref), str(args.hyp): sha256_file(args.hyp)}

    if args.metric == "der":
        ref = read_rttm(args.ref)
        hyp = read_rttm(args.hyp)
        collar = args.collar if args.collar is not None else cfg["score"]["der_collar_s"]
        results["der"] = der(ref, hyp, collar_s=collar)
        results["collar_s"] = collar
        figures.save_diarization_timeline(
            list(ref.tracks), list(hyp.tracks), out_dir / "der_timeline.png"
        )
    elif args.metric == "sdr":
        ref = read_wav(args.ref)
        hyp = read_wav(args.hyp)
        results["sdr_db"] = sdr(ref, hyp)
    else:
        results["cpwer"] = cpwer(_load_transcripts(args.ref), _load_transcripts(args.hyp))

    with open(out_dir / "scores.json", "w") as f:
        json.dump(results, f, indent=2, sort_keys=True)
        f.write("\n")
    write_manifest(
        out_dir / "manifest.json",
        command="score",
        config=cfg,
        seed=0,
        inputs=inputs,
        results=results,
        extra={"ref": str(args.ref), "hyp": str(args.hyp), "metric": args.metric,
               "collar": args.collar},
    )
    width = max(len(k) for k in results)
    for k, v in results.items():
        print(f"{k:>{width}} : {v}")
    return 0


# ---------------------------------------------------------------------------
# embed-study
# ---------------------------------------------------------------------------


def cmd_embed_study(args) -> int:
    cfg = load_config(args.config)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stft_cfg = _stft_from_config(cfg)
    encoder = _encoder_from_config(cfg, stft_cfg)
    mixtures, index = harness.load_corpus(args.corpus)
    log_event("embed_study.start", n_mixtures=len(mixtures))
    rows, summary = harness.embed_study(
        mixtures, encoder, seed=args.seed,
        overlap_fraction=cfg["stage1"]["overlap_fraction"],
    )

    csv_path = out_dir / "embed_study.csv"
    import csv as csv_mod

    with open(csv_path, "w", newline="") as f:
        writer = csv_mod.DictWriter(f, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
    with open(out_dir / "embed_study.json", "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
        f.write("\n")
    figures.save_variant_cosines(
        {
            "V2": [r["cos_v2_v1"] for r in rows],
            "V3": [r["cos_v3_v1"] for r in rows],
            "V4": [r["cos_v4_v1"] for r in rows],
        },
        out_dir / "embed_study.png",
    )
    write_manifest(
        out_dir / "manifest.json",
        command="embed-study",
        config=cfg,
        seed=args.seed,
        inputs={str(Path(args.corpus) / "corpus.json"): index["hash"]},
        results=summary,
        extra={"corpus": str(args.corpus)},
    )
    for k, v in summary.items():
        print(f"{k}: {v}")
    return 0


# ---------------------------------------------------------------------------
# replay
# ---------------------------------------------------------------------------


def _manifest_args(doc: dict, manifest_dir: Path, out_dir: Path):
    """Rebuild the argparse namespace for the recorded command."""
    command = doc["command"]
    config_path = out_dir / "replay_config.json"
    with open(config_path, "w") as f:
        json.dump(doc["config"], f)
    ns = argparse.Namespace(config=config_path, out_dir=str(out_dir), seed=doc["seed"])
    if command == "train":
        ns.stage = doc["results"]["stage"]
        ns.corpus = doc["corpus"]
        ns.init_from = doc["init_from"]
    elif command == "infer":
        ns.mix = doc["mix"]
        ns.ckpt = doc["ckpt"]
        ns.manifest = doc["mixture_manifest"]
        ns.vad_threshold_db = doc["cli_overrides"]["vad_threshold_db"]
        ns.num_speakers = doc["cli_overrides"]["num_speakers"]
    elif command == "score":
        ns.metric = doc["metric"]
        ns.ref = doc["ref"]
        ns.hyp = doc["hyp"]
        ns.collar = doc["collar"]
    elif command == "embed-study":
        ns.corpus = doc["corpus"]
    return ns


def cmd_replay(args) -> int:
    doc = read_manifest(args.manifest)
    command = doc["command"]
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    runner = {
        "synth": cmd_synth,
        "train": cmd_train,
        "infer": cmd_infer,
        "score": cmd_score,
        "embed-study": cmd_embed_study,
    }[command]
    ns = _manifest_args(doc, Path(args.manifest).parent, out_dir)
    log_event("replay.start", command=command)
    rc = runner(ns)
    if rc != 0:
        return rc
    new_doc = read_manifest(out_dir / "manifest.json")
    if new_doc["results"] == doc["results"]:
        print("replay OK: results identical")
        return 0
    print("replay MISMATCH:")
    print(json.dumps({"recorded": doc["results"], "replayed": new_doc["results"]}, indent=2))
    return 1


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sepdiar",
        description="Enrollment-free target-speech separation and diarization toolkit.",
    )
    # Global flags; the same flags after a subcommand take precedence.
    parser.add_argument("--config", default=None, help="JSON config file (defaults used when absent)")
    parser.add_argument("--seed", dest="global_seed", type=int, default=None)
    parser.add_argument("--out-dir", dest="global_out_dir", default=None)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed=True):
        p.add_argument("--out-dir", default=None)
        if seed:
            p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("synth", help="synthesize a toy overlapped-speech corpus")
    common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train stage 1 (activity) or stage 2 (separation)")
    p.add_argument("--stage", type=int, choices=(1, 2), required=True)
    p.add_argument("--corpus", required=True, help="directory produced by synth")
    p.add_argument("--init-from", default=None, help="stage-1 checkpoint for stage 2")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="separate and diarize a recording")
    p.add_argument("--mix", required=True, help="input WAV (16 kHz mono PCM)")
    p.add_argument("--ckpt", required=True, help="stage-2 checkpoint")
    p.add_argument("--vad-threshold-db", type=float, default=None)
    p.add_argument("--num-speakers", type=int, default=None)
    p.add_argument("--manifest", default=None, help="mixture manifest enabling the oracle overlap filter")
    common(p)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("score", help="score diarization, separation, or transcripts")
    p.add_argument("metric", choices=("der", "sdr", "cpwer"))
    p.add_argument("--ref", required=True)
    p.add_argument("--hyp", required=True)
    p.add_argument("--collar", type=float, default=None, help="DER collar seconds")
    common(p, seed=False)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("embed-study", help="sampling-variant similarity and purity report")
    p.add_argument("--corpus", required=True)
    common(p)
    p.set_defaults(func=cmd_embed_study)

    p = sub.add_parser("replay", help="re-run a recorded manifest and verify results")
    p.add_argument("--manifest", required=True)
    common(p, seed=False)
    p.set_defaults(func=cmd_replay)
    return parser


def _resolve_common_flags(parser, args) -> None:
    out_dir = args.out_dir if args.out_dir is not None else args.global_out_dir
    if out_dir is None:
        parser.error(f"{args.command}: --out-dir is required (global or per-command)")
    args.out_dir = out_dir
    if hasattr(args, "seed"):
        if args.seed is None:
            args.seed = args.global_seed if args.global_seed is not None else 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _resolve_common_flags(parser, args)
    try:
        return args.func(args)
    except (ConfigError, MetricError, SignalError, PipelineError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
