"""Command-line entry points: ``synth``, ``extract`` and ``run``.

Exit codes: 0 success, 1 runtime error, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from . import __version__
from .corpus import SynthParams, load_manifest, load_waveform, synth_corpus
from .evaluation import SYSTEMS, ExperimentConfig, extract_features, run_experiment
from .frontend import (
    DEFAULT_BANDS,
    DEFAULT_F_HI,
    DEFAULT_F_LO,
    DEFAULT_FRAME_LENGTH,
    DEFAULT_STFT_FRAME_LENGTH,
    Kind,
    design_filterbank,
    envelope_and_fine_structure,
    save_representation,
    save_representation_csv,
    stft_log_magnitude,
)
from .training import TrainConfig

log = logging.getLogger("tefs")


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    """Every tunable of an experiment; defaults follow the reference setup."""

    manifest: str = ""
    out: str = "results"
    working_rate: int = 16000
    n_bands: int = DEFAULT_BANDS
    f_lo: float = DEFAULT_F_LO
    f_hi: float = DEFAULT_F_HI
    frame_length: float = DEFAULT_FRAME_LENGTH
    stft_frame_length: float = DEFAULT_STFT_FRAME_LENGTH
    segment_frames: int = 50
    overlap: float = 0.5
    norm_mode: str = "global"
    batch_size: int = 128
    initial_lr: float = 0.01
    lr_patience: int = 5
    lr_floor: float = 1e-6
    max_epochs: int = 100
    restore_best: bool = True
    n_folds: int = 10
    n_splits: int = 5
    n_seeds: int = 5
    seed: int = 0
    n_jobs: int = 1
    systems: str = ",".join(SYSTEMS)

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        data = json.loads(Path(path).read_text())
        if not isinstance(data, dict):
            raise UsageError(f"{path}: config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise UsageError(f"{path}: unknown config key(s): {', '.join(unknown)}")
        return cls(**data)

    def experiment(self) -> ExperimentConfig:
        train = TrainConfig(
            batch_size=self.batch_size,
            initial_lr=self.initial_lr,
            lr_patience=self.lr_patience,
            lr_floor=self.lr_floor,
            max_epochs=self.max_epochs,
            restore_best=self.restore_best,
        )
        return ExperimentConfig(
            n_bands=self.n_bands, f_lo=self.f_lo, f_hi=self.f_hi, frame_length=self.frame_length,
            stft_frame_length=self.stft_frame_length, segment_frames=self.segment_frames,
            overlap=self.overlap, norm_mode=self.norm_mode, n_folds=self.n_folds,
            n_splits=self.n_splits, n_seeds=self.n_seeds, seed=self.seed, n_jobs=self.n_jobs, train=train,
        )

    def system_list(self) -> list[str]:
        names = [s.strip() for s in self.systems.split(",") if s.strip()]
        bad = [s for s in names if s not in SYSTEMS]
        if bad or not names:
            raise UsageError(f"unknown system(s) {bad}; choose from {', '.join(SYSTEMS)}")
        return names


def _bool(text: str) -> bool:
    if text.lower() in ("1", "true", "yes", "on"):
        return True
    if text.lower() in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    d = RunConfig()
    helps = {
        "manifest": "corpus manifest CSV",
        "out": "output directory",
        "working_rate": "analysis sample rate in Hz",
        "n_bands": "number of Greenwood-spaced bands K",
        "f_lo": "lowest filterbank cut-off in Hz",
        "f_hi": "highest filterbank cut-off in Hz",
        "frame_length": "envelope / fine-structure frame length in seconds",
        "stft_frame_length": "STFT window length in seconds",
        "segment_frames": "frames per network input segment B",
        "overlap": "segment overlap fraction",
        "norm_mode": "z-score granularity: global or per_band",
        "batch_size": "SGD mini-batch size",
        "initial_lr": "initial learning rate",
        "lr_patience": "dev evaluations without improvement before halving the rate",
        "lr_floor": "stop once the learning rate falls below this",
        "max_epochs": "maximum number of epochs",
        "restore_best": "return the best-dev-loss model instead of the last one",
        "n_folds": "cross-validation folds",
        "n_splits": "repetitions with different speaker splits",
        "n_seeds": "random initialisations per fold",
        "seed": "master seed",
        "n_jobs": "parallel worker processes",
        "systems": f"comma-separated systems from {', '.join(SYSTEMS)}",
    }
    aliases = {"n_splits": ["--splits"], "n_seeds": ["--seeds"], "n_folds": ["--folds"]}
    for f in fields(RunConfig):
        flags = ["--" + f.name.replace("_", "-")] + aliases.get(f.name, [])
        typ = _bool if f.type in (bool, "bool") else type(getattr(d, f.name))
        p.add_argument(*flags, dest=f.name, type=typ, default=None,
                       help=f"{helps[f.name]} (default: {getattr(d, f.name)})")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tefs", description="Envelope / fine-structure dysarthric speech detection.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic labelled corpus")
    p.add_argument("--speakers", type=int, default=100, help="number of speakers, even (default: 100)")
    p.add_argument("--seed", type=int, default=0, help="random seed (default: 0)")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--params", type=Path, help="JSON file of synthesis parameters (see README)")
    p.add_argument("--seconds", type=float, help="speech per speaker in seconds (default: 30)")

    p = sub.add_parser("extract", help="compute and store representations per utterance")
    p.add_argument("--manifest", type=Path, required=True, help="corpus manifest CSV")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--kind", action="append", choices=[k.value for k in Kind] + ["env", "fs", "all"],
                   help="representation(s) to write; repeatable (default: all)")
    p.add_argument("--working-rate", type=int, default=16000, help="analysis sample rate in Hz (default: 16000)")
    p.add_argument("--n-bands", type=int, default=DEFAULT_BANDS, help=f"bands K (default: {DEFAULT_BANDS})")
    p.add_argument("--f-lo", type=float, default=DEFAULT_F_LO, help=f"lowest cut-off in Hz (default: {DEFAULT_F_LO})")
    p.add_argument("--f-hi", type=float, default=DEFAULT_F_HI, help=f"highest cut-off in Hz (default: {DEFAULT_F_HI})")
    p.add_argument("--frame-length", type=float, default=DEFAULT_FRAME_LENGTH,
                   help=f"envelope / fine-structure frame in seconds (default: {DEFAULT_FRAME_LENGTH})")
    p.add_argument("--stft-frame-length", type=float, default=DEFAULT_STFT_FRAME_LENGTH,
                   help=f"STFT window in seconds (default: {DEFAULT_STFT_FRAME_LENGTH}; 0.006 for the illustration)")
    p.add_argument("--render", action="store_true", help="also write CSV matrices and PNG images")

    p = sub.add_parser("run", help="cross-validated training and evaluation")
    p.add_argument("--config", type=Path, help="JSON run configuration; flags override its values")
    _add_run_flags(p)
    return parser


def cmd_synth(args) -> int:
    if args.speakers < 2 or args.speakers % 2:
        raise UsageError(f"--speakers must be a positive even number, got {args.speakers}")
    params = SynthParams.from_file(args.params) if args.params else SynthParams()
    if args.seconds is not None:
        params.speaker_seconds = args.seconds
    manifest = synth_corpus(args.speakers, args.seed, args.out, params)
    print(f"wrote {len(manifest.speakers)} speakers, {len(manifest.entries)} utterances")
    print(args.out / "manifest.csv")
    return 0


def _render(rep, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    v = rep.values
    fig, ax = plt.subplots(figsize=(8, 3))
    ax.imshow(v, origin="lower", aspect="auto", cmap="viridis", vmin=v.min(), vmax=v.max(),
              interpolation="nearest")
    ax.set_xlabel("frame")
    ax.set_ylabel("band" if rep.kind is not Kind.STFT else "bin")
    ax.set_title(f"{rep.kind.value} ({v.shape[0]} x {v.shape[1]})")
    fig.text(0.99, 0.01, f"min {v.min():.3g}  max {v.max():.3g}", ha="right", va="bottom", fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)


def cmd_extract(args) -> int:
    wanted = set()
    for k in args.kind or ["all"]:
        wanted |= {"env": {Kind.ENVELOPE}, "fs": {Kind.FINE_STRUCTURE},
                   "all": set(Kind)}.get(k, {Kind(k)} if k in {x.value for x in Kind} else set())
    manifest = load_manifest(args.manifest, args.working_rate)
    args.out.mkdir(parents=True, exist_ok=True)
    fb = None
    written = 0
    for entry in manifest.entries:
        w = load_waveform(entry.audio_path, manifest.working_rate)
        if fb is None:
            fb = design_filterbank(args.n_bands, args.f_lo, args.f_hi, w.sample_rate)
        stem = f"{entry.speaker_id}__{entry.audio_path.stem}"
        try:
            reps = []
            if wanted & {Kind.ENVELOPE, Kind.FINE_STRUCTURE}:
                env, tfs = envelope_and_fine_structure(w, fb, args.frame_length)
                reps += [r for r in (env, tfs) if r.kind in wanted]
            if Kind.STFT in wanted:
                reps.append(stft_log_magnitude(w, args.stft_frame_length))
        except ValueError as exc:
            warnings.warn(f"skipping {entry.audio_path}: {exc}")
            continue
        for rep in reps:
            base = args.out / f"{stem}.{rep.kind.value}"
            save_representation(rep, base.with_suffix(base.suffix + ".bin"))
            if args.render:
                save_representation_csv(rep, base.with_suffix(base.suffix + ".csv"))
                _render(rep, base.with_suffix(base.suffix + ".png"))
            written += 1
    print(f"wrote {written} representation file(s) to {args.out}")
    return 0


def run_config_from_args(args) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
    for f in fields(RunConfig):
        value = getattr(args, f.name, None)
        if value is not None:
            setattr(cfg, f.name, value)
    if not cfg.manifest:
        raise UsageError("a manifest is required (--manifest or config key 'manifest')")
    return cfg


def cmd_run(args) -> int:
    cfg = run_config_from_args(args)
    systems = cfg.system_list()
    try:
        exp = cfg.experiment()
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    manifest = load_manifest(cfg.manifest, cfg.working_rate)
    kinds = sorted({k for s in systems for k in SYSTEMS[s][1]}, key=lambda k: k.code)
    store = extract_features(manifest, kinds, exp)
    report = run_experiment(store, systems, exp)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json())
    table = report.table()
    (out / "report.txt").write_text(table)
    (out / "run_config.json").write_text(json.dumps(asdict(cfg), indent=2, sort_keys=True) + "\n")
    print(table, end="")
    return 0


COMMANDS = {"synth": cmd_synth, "extract": cmd_extract, "run": cmd_run}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"tefs {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - report any runtime failure as exit 1
        log.debug("command failed", exc_info=True)
        print(f"tefs {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
