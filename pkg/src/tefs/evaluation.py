"""Speaker-independent cross-validation, soft voting and AUC/accuracy reporting."""

from __future__ import annotations

import json
import logging
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from .corpus import CorpusManifest, Speaker, load_waveform
from .frontend import (
    DEFAULT_BANDS,
    DEFAULT_F_HI,
    DEFAULT_F_LO,
    DEFAULT_FRAME_LENGTH,
    DEFAULT_STFT_FRAME_LENGTH,
    Kind,
    design_filterbank,
    envelope_and_fine_structure,
    stft_log_magnitude,
)
from .network import build_architecture
from .segments import DEFAULT_OVERLAP, DEFAULT_SEGMENT_FRAMES, NormMode, Segment, fit_norm, normalize_array, segment
from .training import TrainConfig, TrainingData, train, transfer_init_tefs

log = logging.getLogger(__name__)

N_FOLDS = 10

# system name -> (architecture, input kinds, report row label)
SYSTEMS = {
    "a1-stft": ("A1", (Kind.STFT,), "A1 - Magnitude of STFT"),
    "a2-stft": ("A2", (Kind.STFT,), "A2 - Magnitude of STFT"),
    "a1-env": ("A1", (Kind.ENVELOPE,), "A1 - Envelope"),
    "a2-env": ("A2", (Kind.ENVELOPE,), "A2 - Envelope"),
    "a1-fs": ("A1", (Kind.FINE_STRUCTURE,), "A1 - Fine structure"),
    "a2-fs": ("A2", (Kind.FINE_STRUCTURE,), "A2 - Fine structure"),
    "tefs": ("TEFS", (Kind.ENVELOPE, Kind.FINE_STRUCTURE), "TEFS"),
}
# TEFS branches are initialised from these baselines
TEFS_BASELINES = ("a1-env", "a1-fs")


# ---------------------------------------------------------------------------
# folds


@dataclass(frozen=True)
class FoldPlan:
    split_seed: int
    folds: tuple  # tuple of tuples of speaker ids

    def train_pool(self, fold: int) -> list[str]:
        return [s for i, f in enumerate(self.folds) if i != fold for s in f]


def _strata(speakers: Sequence[Speaker], rng: np.random.Generator) -> list[Speaker]:
    """Speakers ordered label by label, genders alternating direction between labels.

    Dealing this sequence round-robin hands each fold an even share of every
    label, and within a label the gender remainders land on different folds
    for each label so the totals also even out.
    """
    ordered = []
    by_id = sorted(speakers, key=lambda s: s.id)
    for i, label in enumerate(sorted({s.label for s in by_id})):
        genders = ["F", "M"] if i % 2 == 0 else ["M", "F"]
        for g in genders:
            group = [s for s in by_id if s.label == label and s.gender == g]
            ordered += [group[j] for j in rng.permutation(len(group))]
    return ordered


def make_folds(speakers: Sequence[Speaker], split_seed: int, n_folds: int = N_FOLDS) -> FoldPlan:
    """Stratified speaker-level folds, deterministic for ``split_seed``.

    Input order does not matter: speakers are sorted by id before shuffling.
    """
    ids = [s.id for s in speakers]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate speaker ids")
    for label in (0, 1):
        count = sum(s.label == label for s in speakers)
        if count < n_folds:
            raise ValueError(
                f"cannot stratify {n_folds} folds: only {count} speaker(s) with label {label}"
            )
    rng = np.random.default_rng(split_seed)
    ordered = _strata(speakers, rng)
    fold_of = rng.permutation(n_folds)  # which fold receives the first dealt speaker, etc.
    folds = [[] for _ in range(n_folds)]
    for i, s in enumerate(ordered):
        folds[fold_of[i % n_folds]].append(s.id)
    return FoldPlan(split_seed, tuple(tuple(sorted(f)) for f in folds))


def _largest_remainder(total: int, weights: Sequence[int], rng) -> list[int]:
    weights = np.asarray(weights, dtype=float)
    exact = total * weights / weights.sum()
    quota = np.floor(exact).astype(int)
    rest = total - quota.sum()
    # ties between equal remainders are broken at random
    order = np.lexsort((rng.random(len(weights)), -(exact - quota)))
    quota[order[:rest]] += 1
    return quota.tolist()


def carve_dev(pool: Sequence[Speaker], dev_size: int, seed: int) -> tuple[list[Speaker], list[Speaker]]:
    """Split a training pool into (train, dev) with a stratified dev set of ``dev_size`` speakers."""
    if dev_size < 1 or len(pool) <= dev_size:
        raise ValueError(f"pool of {len(pool)} speakers is too small for a dev set of {dev_size}")
    rng = np.random.default_rng(seed)
    pool = sorted(pool, key=lambda s: s.id)
    labels = sorted({s.label for s in pool})
    per_label = _largest_remainder(dev_size, [sum(s.label == l for s in pool) for l in labels], rng)
    dev = []
    for label, n_label in zip(labels, per_label):
        groups = [[s for s in pool if s.label == label and s.gender == g] for g in ("F", "M")]
        per_gender = _largest_remainder(n_label, [max(len(g), 0) for g in groups], rng)
        for group, n in zip(groups, per_gender):
            picks = rng.permutation(len(group))[:n]
            dev += [group[j] for j in sorted(picks)]
    dev_ids = {s.id for s in dev}
    return [s for s in pool if s.id not in dev_ids], sorted(dev, key=lambda s: s.id)


# ---------------------------------------------------------------------------
# scoring


@dataclass(frozen=True)
class SpeakerScore:
    speaker_id: str
    score: float
    label: int

    @property
    def predicted(self) -> int:
        return predict_label(self.score)


def soft_vote(segment_probs) -> float:
    """Speaker score: mean class-1 probability over the speaker's segments."""
    p = np.asarray(segment_probs, dtype=np.float64)
    if p.size == 0:
        raise ValueError("cannot vote over zero segments")
    if np.any((p < 0) | (p > 1)):
        raise ValueError("segment probabilities must lie in [0, 1]")
    return float(p.mean())


def predict_label(score: float, threshold: float = 0.5) -> int:
    # a score exactly at the threshold is assigned class 0
    return int(score > threshold)


def auc(scores: Sequence[SpeakerScore]) -> float:
    """Area under the ROC curve via the Mann-Whitney rank statistic (ties count one half)."""
    labels = np.array([s.label for s in scores])
    values = np.array([s.score for s in scores], dtype=np.float64)
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs at least one speaker of each class")
    ranks = rankdata(values)
    u = ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def accuracy(scores: Sequence[SpeakerScore]) -> float:
    if not scores:
        raise ValueError("accuracy of an empty score list")
    return sum(s.predicted == s.label for s in scores) / len(scores)


# ---------------------------------------------------------------------------
# features


@dataclass
class ExperimentConfig:
    n_bands: int = DEFAULT_BANDS
    f_lo: float = DEFAULT_F_LO
    f_hi: float = DEFAULT_F_HI
    frame_length: float = DEFAULT_FRAME_LENGTH
    stft_frame_length: float = DEFAULT_STFT_FRAME_LENGTH
    segment_frames: int = DEFAULT_SEGMENT_FRAMES
    overlap: float = DEFAULT_OVERLAP
    norm_mode: str = NormMode.GLOBAL.value
    n_folds: int = N_FOLDS
    n_splits: int = 5
    n_seeds: int = 5
    seed: int = 0
    n_jobs: int = 1
    train: TrainConfig = field(default_factory=TrainConfig)


@dataclass
class FeatureStore:
    """Segments per representation kind and speaker, plus speaker metadata."""

    speakers: list[Speaker]
    segments: dict  # Kind -> {speaker_id: list[Segment]}

    def stack(self, kind: Kind, speaker_ids: Sequence[str]):
        segs = [s for sid in speaker_ids for s in self.segments[kind].get(sid, [])]
        if not segs:
            return np.empty((0, 0, 0), np.float32), np.empty(0, np.int64), np.empty(0, dtype=object), segs
        x = np.stack([s.values for s in segs]).astype(np.float32)
        return x, np.array([s.label for s in segs]), np.array([s.speaker_id for s in segs]), segs


def extract_features(manifest: CorpusManifest, kinds: Sequence[Kind], config: ExperimentConfig) -> FeatureStore:
    """Load every utterance, compute the requested representations and cut segments.

    Utterances too short for one segment are skipped with a warning.
    """
    kinds = [Kind(k) for k in kinds]
    segs = {k: {} for k in kinds}
    fb = None
    for entry in manifest.entries:
        w = load_waveform(entry.audio_path, manifest.working_rate)
        if fb is None or fb.sample_rate != w.sample_rate:
            fb = design_filterbank(config.n_bands, config.f_lo, config.f_hi, w.sample_rate)
        reps = {}
        try:
            if Kind.ENVELOPE in kinds or Kind.FINE_STRUCTURE in kinds:
                reps[Kind.ENVELOPE], reps[Kind.FINE_STRUCTURE] = envelope_and_fine_structure(
                    w, fb, config.frame_length
                )
            if Kind.STFT in kinds:
                reps[Kind.STFT] = stft_log_magnitude(w, config.stft_frame_length)
            cut = {
                k: segment(reps[k], config.segment_frames, config.overlap, speaker_id=entry.speaker_id,
                           label=entry.label, utterance=entry.audio_path.name)
                for k in kinds
            }
        except ValueError as exc:
            warnings.warn(f"skipping {entry.audio_path}: {exc}")
            continue
        for k in kinds:
            segs[k].setdefault(entry.speaker_id, []).extend(cut[k])
    return FeatureStore(manifest.speakers, segs)


# ---------------------------------------------------------------------------
# experiment


def derive_seed(*keys: int) -> int:
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])


@dataclass
class EvalReport:
    rows: list[dict]
    config: dict

    def aggregate(self) -> dict:
        out = {}
        for system in dict.fromkeys(r["system"] for r in self.rows):
            rows = [r for r in self.rows if r["system"] == system]
            aucs = np.array([r["auc"] for r in rows])
            accs = np.array([r["accuracy"] for r in rows])
            out[system] = {
                "label": SYSTEMS[system][2],
                "n_models": len(rows),
                "auc_mean": float(aucs.mean()),
                "auc_std": float(aucs.std()),
                "accuracy_mean": float(accs.mean()),
                "accuracy_std": float(accs.std()),
            }
        return out

    def to_json(self) -> str:
        payload = {"config": self.config, "models": self.rows, "aggregate": self.aggregate()}
        return json.dumps(payload, indent=2, sort_keys=True) + "\n"

    def table(self) -> str:
        agg = self.aggregate()
        lines = [f"{'Network':<28}{'AUC':>16}{'Accuracy [%]':>22}", "-" * 66]
        for system in SYSTEMS:
            if system in agg:
                a = agg[system]
                lines.append(
                    f"{a['label']:<28}{a['auc_mean']:>9.2f} ± {a['auc_std']:<4.2f}"
                    f"{100 * a['accuracy_mean']:>13.2f} ± {100 * a['accuracy_std']:<5.2f}"
                )
        return "\n".join(lines) + "\n"


def _training_data(store, kinds, speaker_ids, stats):
    xs, labels, speakers, keys = [], None, None, None
    for kind in kinds:
        x, y, spk, segs = store.stack(kind, speaker_ids)
        k = [(s.speaker_id, s.utterance, s.start) for s in segs]
        if keys is not None and k != keys:
            raise ValueError("envelope and fine-structure segments are not paired")
        keys, labels, speakers = k, y, spk
        xs.append(normalize_array(stats[kind], x) if len(segs) else x)
    return TrainingData(xs, labels, speakers)


def _score_speakers(model, data: TrainingData, test_speakers: Sequence[Speaker]) -> list[SpeakerScore]:
    probs = model.predict(data.inputs) if len(data) else np.empty(0)
    scores = []
    for spk in test_speakers:
        mask = data.speakers == spk.id
        if not mask.any():
            warnings.warn(f"speaker {spk.id} has no segments; excluded from scoring")
            continue
        scores.append(SpeakerScore(spk.id, soft_vote(probs[mask]), spk.label))
    return scores


def speaker_sets(speakers: Sequence[Speaker], config: ExperimentConfig, split: int,
                 fold: int) -> tuple[list[str], list[str], list[str]]:
    """(train, dev, test) speaker ids used by every model of one (split, fold)."""
    by_id = {s.id: s for s in speakers}
    plan = make_folds(speakers, derive_seed(config.seed, split), config.n_folds)
    test_ids = list(plan.folds[fold])
    pool = [by_id[i] for i in plan.train_pool(fold)]
    train_spk, dev_spk = carve_dev(pool, len(test_ids), derive_seed(config.seed, split, fold, 1))
    return [s.id for s in train_spk], [s.id for s in dev_spk], test_ids


def run_job(store: FeatureStore, systems: Sequence[str], config: ExperimentConfig,
            split: int, fold: int, seed_index: int) -> list[dict]:
    """Train and score every requested system for one (split, fold, seed)."""
    speakers = {s.id: s for s in store.speakers}
    train_ids, dev_ids, test_ids = speaker_sets(store.speakers, config, split, fold)
    model_seed = derive_seed(config.seed, split, fold, seed_index, 2)
    tcfg = TrainConfig(**{**asdict(config.train), "seed": model_seed})

    kinds_needed = {k for name in systems for k in SYSTEMS[name][1]}
    stats = {}
    for kind in kinds_needed:
        train_segs = [s for sid in train_ids for s in store.segments[kind].get(sid, [])]
        stats[kind] = fit_norm(train_segs, config.norm_mode)

    order = [s for s in TEFS_BASELINES if "tefs" in systems] + [s for s in systems if s not in TEFS_BASELINES]
    order = list(dict.fromkeys(order + list(systems)))
    trained = {}
    rows = []
    for name in order:
        tag, kinds, _ = SYSTEMS[name]
        train_data = _training_data(store, kinds, train_ids, stats)
        dev_data = _training_data(store, kinds, dev_ids, stats)
        test_data = _training_data(store, kinds, test_ids, stats)
        if tag == "TEFS":
            model = transfer_init_tefs(trained["a1-env"], trained["a1-fs"], seed=derive_seed(model_seed, 3))
        else:
            n_rows = train_data.inputs[0].shape[1]  # K for auditory kinds, STFT bin count otherwise
            model = build_architecture(tag, n_rows, config.segment_frames, seed=model_seed)
        try:
            model, tlog = train(model, train_data, dev_data, tcfg)
        except Exception as exc:
            raise RuntimeError(f"{name}: training failed for split {split}, fold {fold}, seed {seed_index}: {exc}") from exc
        trained[name] = model
        if name not in systems:
            continue
        scores = _score_speakers(model, test_data, [speakers[i] for i in test_ids])
        rows.append({
            "system": name,
            "split": split,
            "fold": fold,
            "seed": seed_index,
            "auc": auc(scores),
            "accuracy": accuracy(scores),
            "n_test_speakers": len(scores),
            "epochs": len(tlog.records),
            "best_epoch": tlog.best_epoch,
            "stop_reason": tlog.stop_reason,
            "scores": {s.speaker_id: s.score for s in scores},
        })
        log.info("%s split=%d fold=%d seed=%d auc=%.3f acc=%.3f epochs=%d",
                 name, split, fold, seed_index, rows[-1]["auc"], rows[-1]["accuracy"], len(tlog.records))
    return rows


def _config_dict(config: ExperimentConfig, systems) -> dict:
    d = asdict(config)
    d.pop("n_jobs")
    d["train"]["freeze"] = list(d["train"]["freeze"])
    d["systems"] = list(systems)
    return d


def run_experiment(store: FeatureStore, systems: Sequence[str], config: ExperimentConfig | None = None) -> EvalReport:
    """Run every (split, fold, seed) job and collect per-model rows.

    Results are keyed by (system, split, fold, seed) so the report does not
    depend on job completion order.
    """
    config = config or ExperimentConfig()
    systems = list(dict.fromkeys(systems))
    for name in systems:
        if name not in SYSTEMS:
            raise ValueError(f"unknown system {name!r}; choose from {', '.join(SYSTEMS)}")
    jobs = [(s, f, r) for s in range(config.n_splits) for f in range(config.n_folds) for r in range(config.n_seeds)]
    if config.n_jobs > 1:
        with ProcessPoolExecutor(max_workers=config.n_jobs) as pool:
            futures = [pool.submit(run_job, store, systems, config, *j) for j in jobs]
            results = [f.result() for f in futures]
    else:
        results = [run_job(store, systems, config, *j) for j in jobs]
    rows = [row for job_rows in results for row in job_rows]
    rank = {name: i for i, name in enumerate(systems)}
    rows.sort(key=lambda r: (rank[r["system"]], r["split"], r["fold"], r["seed"]))
    return EvalReport(rows, _config_dict(config, systems))
