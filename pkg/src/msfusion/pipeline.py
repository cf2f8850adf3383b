"""End-to-end experiment: images, autoencoders, features, nested CV, report."""
from __future__ import annotations

import json
import logging
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import cae, dsp
from .config import ExperimentConfig
from .evaluation import EvalReport, LeakageAudit, SegmentFeatures, make_fold_plan, run_nested_cv
from .fileio import atomic_write_text
from .manifest import Manifest, parse_manifest
from .synth import SynthSpec, synth_corpus

log = logging.getLogger(__name__)

BACKGROUND_SEED_OFFSET = 1000
# uniformly placed 500 ms windows per second of background audio
BACKGROUND_SEGMENTS_PER_S = 5.0


@dataclass
class TrainedAE:
    config: cae.CAEConfig
    graph: object
    report: cae.TrainReport
    speakers: list

    @property
    def name(self) -> str:
        return "+".join(self.config.branch_names)


def extract_images(manifest: Manifest, representations, uniform_seed=None) -> cae.ImageSet:
    """Segments of every manifest row, imaged per representation.

    Segments are plosive-aligned unless ``uniform_seed`` is given, in which
    case onsets are drawn uniformly over each clip.
    """
    specs = [dsp.get_spec(r) for r in representations]
    rng = None if uniform_seed is None else np.random.default_rng(uniform_seed)
    per_segment = []
    for row in manifest.rows:
        clip = dsp.load_audio(row.path, row.speaker_id, row.utterance_id)
        if rng is not None:
            n = max(1, int(round(BACKGROUND_SEGMENTS_PER_S * clip.duration_s)))
            segments = dsp.uniform_segments(clip, n, rng)
        else:
            onsets = dsp.read_alignments(row.alignments) if row.alignments is not None else None
            segments = dsp.segment_aligned(clip, onsets)
        for seg in segments:
            per_segment.append({s.name: dsp.compute_image(seg, s) for s in specs})
    return cae.ImageSet.from_images(per_segment)


def background_images(config: ExperimentConfig, representations, work_dir=None) -> cae.ImageSet:
    """Images for autoencoder training, from a separate healthy-speech corpus.

    ``config.background_segments`` chooses plosive-aligned or uniformly
    placed segments. Without a background manifest a synthetic corpus is
    generated in a scratch directory under ``work_dir`` (the system temp
    directory when None) and removed afterwards.
    """
    uniform_seed = config.seed if config.background_segments == "uniform" else None
    if config.background_manifest:
        return extract_images(parse_manifest(config.background_manifest), representations, uniform_seed)
    spec = SynthSpec(n_controls=config.background_speakers, n_patients=0,
                     duration_s=config.background_duration_s, prefix="bg")
    if work_dir is not None:
        Path(work_dir).mkdir(parents=True, exist_ok=True)
    with tempfile.TemporaryDirectory(prefix=".background-", dir=work_dir) as tmp:
        manifest = synth_corpus(tmp, spec, seed=config.seed + BACKGROUND_SEED_OFFSET)
        return extract_images(parse_manifest(manifest), representations, uniform_seed)


def split_by_speaker(images: cae.ImageSet, valid_fraction: float, seed: int):
    speakers = sorted(set(images.speaker_ids))
    if len(speakers) < 2:
        raise ValueError("autoencoder training needs at least two background speakers")
    rng = np.random.default_rng(seed)
    order = [speakers[i] for i in rng.permutation(len(speakers))]
    n_valid = min(len(speakers) - 1, max(1, int(round(valid_fraction * len(speakers)))))
    valid = set(order[:n_valid])
    idx_v = [i for i, s in enumerate(images.speaker_ids) if s in valid]
    idx_t = [i for i, s in enumerate(images.speaker_ids) if s not in valid]
    return images.subset(idx_t), images.subset(idx_v)


def train_autoencoders(config: ExperimentConfig, background: cae.ImageSet, progress=None) -> list:
    train, valid = split_by_speaker(background, config.background_valid_fraction, config.seed)
    models = []
    for group in config.model_groups():
        ccfg = config.cae_config(group)
        graph = cae.build_cae(ccfg)
        report = cae.train_autoencoder(graph, train, valid, ccfg, progress=progress)
        log.info("autoencoder %s: best epoch %d, valid loss %.5f", "+".join(group),
                 report.best_epoch, report.final_valid_loss)
        models.append(TrainedAE(ccfg, graph, report, sorted(set(background.speaker_ids))))
    return models


def compute_features(models: list, images: cae.ImageSet, composition: str = "both") -> SegmentFeatures:
    """One feature stream per autoencoder, keyed by representation name.

    A multi-branch autoencoder yields a single stream named after its branches
    joined with '+'.
    """
    streams = {}
    for m in models:
        streams[m.name] = cae.feature_matrix(m.graph, images, m.config, composition)
    return SegmentFeatures(list(images.speaker_ids), list(images.utterance_ids), streams)


def report_dict(report: EvalReport, config: ExperimentConfig, models: list) -> dict:
    d = report.to_dict()
    d["experiment"] = {"config_digest": config.digest(), "representations": list(config.representations),
                       "composition": config.composition}
    d["autoencoders"] = {
        m.name: {"best_epoch": m.report.best_epoch, "final_valid_loss": m.report.final_valid_loss,
                 "train_loss": m.report.train_loss, "valid_loss": m.report.valid_loss,
                 "n_background_speakers": len(m.speakers)}
        for m in models
    }
    return d


def dumps_report(d: dict) -> str:
    return json.dumps(d, sort_keys=True, indent=2) + "\n"


def run_experiment(config: ExperimentConfig, manifest_path, out_dir=None, progress=None):
    """Full experiment. Returns (EvalReport, models, LeakageAudit).

    With ``out_dir`` the report is written as ``report.json`` (machine
    readable) and ``report.txt`` (table).
    """
    manifest = parse_manifest(manifest_path)
    cohort = manifest.to_cohort()
    reps = config.representations
    images = extract_images(manifest, reps)
    background = background_images(config, reps, out_dir)
    overlap = set(background.speaker_ids) & set(cohort.speakers)
    if overlap:
        raise ValueError(f"background corpus shares speakers with the cohort: {sorted(overlap)[:5]}")
    models = train_autoencoders(config, background)
    audit = LeakageAudit()
    for m in models:
        audit.record(None, f"autoencoder:{m.name}", m.speakers)
    feats = compute_features(models, images, config.composition)
    cv = config.cv_config()
    plan = make_fold_plan(cohort, cv.seed, cv.n_outer, cv.n_inner)
    report = run_nested_cv(feats, cohort, cv, plan=plan, audit=audit, progress=progress)
    audit.check(plan, cohort.speakers)
    if out_dir is not None:
        out = Path(out_dir)
        atomic_write_text(out / "report.json", dumps_report(report_dict(report, config, models)))
        atomic_write_text(out / "report.txt", report.format_table() + "\n")
    return report, models, audit
