"""Command-line entry point: ``msfusion <subcommand> [options]``.

Subcommands and the artifacts they read and write:

  synth      -> OUT/manifest.csv, OUT/audio/*.wav, OUT/audio/*.txt
  extract    manifest -> OUT/images.npz
  train-ae   background manifest (or synthetic) -> OUT/ae_<branches>.mspc, OUT/ae_report.json
  features   manifest + OUT/ae_*.mspc -> OUT/features.npz
  train-clf  features.npz + manifest -> OUT/classifier.mspc
  evaluate   manifest -> OUT/report.json, OUT/report.txt, OUT/ae_*.mspc
  report     report.json -> table on stdout
"""
from __future__ import annotations

import argparse
import io
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import archive, cae, dsp, pipeline
from .config import ConfigError, ExperimentConfig, load_config
from .evaluation import SegmentFeatures, fit_classifier
from .fileio import atomic_write_bytes, atomic_write_text
from .manifest import parse_manifest
from .synth import CUE_MODES, SynthSpec, synth_corpus

log = logging.getLogger("msfusion")


def _experiment(args) -> ExperimentConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else ExperimentConfig()
    if getattr(args, "branches", None):
        cfg = cfg.with_branches(args.branches, getattr(args, "fusion", None))
    elif getattr(args, "fusion", None):
        cfg = cfg.replace(fusion=args.fusion)
    if getattr(args, "classifier", None):
        cfg = cfg.replace(classifier=args.classifier)
    if getattr(args, "seed", None) is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def _save_npz(path, **arrays):
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    atomic_write_bytes(path, buf.getvalue())


def _images_to_npz(images: cae.ImageSet) -> dict:
    d = {f"image/{k}": v for k, v in images.images.items()}
    d.update(speaker_ids=np.array(images.speaker_ids), utterance_ids=np.array(images.utterance_ids),
             segment_indices=np.array(images.segment_indices))
    return d


def _load_features(path) -> SegmentFeatures:
    with np.load(path) as z:
        streams = {k[len("stream/"):]: z[k] for k in z.files if k.startswith("stream/")}
        return SegmentFeatures(z["speaker_ids"].tolist(), z["utterance_ids"].tolist(), streams)


def _provenance(cfg: ExperimentConfig) -> dict:
    return {"seed": cfg.seed, "config_digest": cfg.digest()}


def _save_models(models, cfg, out: Path) -> list:
    paths = []
    for m in models:
        p = out / f"ae_{m.name.replace('+', '_')}.mspc"
        archive.save_model(archive.pack_autoencoder(m.config, m.graph, _provenance(cfg)), p)
        paths.append(p)
    return paths


def cmd_synth(args) -> int:
    if args.speakers < 2 or (args.speakers % 2 and not args.background):
        raise ValueError("--speakers must be an even number >= 2 (half patients, half controls)")
    if args.background:
        spec = SynthSpec(n_controls=args.speakers, n_patients=0, utterances=args.utterances,
                         duration_s=args.duration, cues=args.cues, prefix="bg")
    else:
        spec = SynthSpec(n_controls=args.speakers // 2, n_patients=args.speakers // 2,
                         utterances=args.utterances, duration_s=args.duration, cues=args.cues)
    path = synth_corpus(args.out, spec, seed=args.seed or 0)
    print(path)
    return 0


def cmd_extract(args) -> int:
    cfg = _experiment(args)
    images = pipeline.extract_images(parse_manifest(args.manifest), cfg.representations)
    path = Path(args.out) / "images.npz"
    _save_npz(path, **_images_to_npz(images))
    print(f"{path}: {len(images)} segments x {list(images.images)}")
    return 0


def cmd_train_ae(args) -> int:
    cfg = _experiment(args)
    if args.manifest:
        cfg = cfg.replace(background_manifest=str(args.manifest))
    background = pipeline.background_images(cfg, cfg.representations, args.out)
    models = pipeline.train_autoencoders(cfg, background)
    out = Path(args.out)
    for p in _save_models(models, cfg, out):
        print(p)
    summary = {m.name: {"best_epoch": m.report.best_epoch, "train_loss": m.report.train_loss,
                        "valid_loss": m.report.valid_loss} for m in models}
    atomic_write_text(out / "ae_report.json", json.dumps(summary, sort_keys=True, indent=2) + "\n")
    return 0


def _load_models(cfg: ExperimentConfig, model_dir: Path) -> list:
    models = []
    for group in cfg.model_groups():
        expect = cfg.cae_config(group)
        path = model_dir / f"ae_{'_'.join(group)}.mspc"
        if not path.is_file():
            raise FileNotFoundError(f"missing autoencoder archive {path} (run train-ae first)")
        ccfg, graph = archive.unpack_autoencoder(archive.load_model(path), expect)
        models.append(pipeline.TrainedAE(ccfg, graph, None, []))
    return models


def cmd_features(args) -> int:
    cfg = _experiment(args)
    models = _load_models(cfg, Path(args.models or args.out))
    images = pipeline.extract_images(parse_manifest(args.manifest), cfg.representations)
    feats = pipeline.compute_features(models, images, cfg.composition)
    path = Path(args.out) / "features.npz"
    arrays = {f"stream/{k}": v for k, v in feats.streams.items()}
    _save_npz(path, speaker_ids=np.array(feats.speaker_ids), utterance_ids=np.array(feats.utterance_ids), **arrays)
    print(f"{path}: {len(feats.speaker_ids)} segments, dims " +
          ", ".join(f"{k}={v.shape[1]}" for k, v in feats.streams.items()))
    return 0


def cmd_train_clf(args) -> int:
    cfg = _experiment(args)
    feats = _load_features(args.features)
    cohort = parse_manifest(args.manifest).to_cohort()
    model, params = fit_classifier(feats, cohort, cfg.cv_config())
    pack = archive.pack_svm if cfg.classifier == "svm" else archive.pack_mlp
    prov = {**_provenance(cfg), "params": {k: v for k, v in params.items()}}
    path = Path(args.out) / "classifier.mspc"
    archive.save_model(pack(model, prov), path)
    print(f"{path}: {cfg.classifier} {params}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = _experiment(args)
    out = Path(args.out)
    report, models, _ = pipeline.run_experiment(cfg, args.manifest, out)
    _save_models(models, cfg, out)
    print(report.format_table())
    print(f"wrote {out / 'report.json'}")
    return 0


def cmd_report(args) -> int:
    path = Path(args.report)
    if path.is_dir():
        path = path / "report.json"
    d = json.loads(path.read_text(encoding="utf-8"))
    lines = [f"{'fold':>4} {'acc':>6} {'auc':>6} {'prec':>6} {'rec':>6} {'n':>4}"]
    for f in d["folds"]:
        lines.append(f"{f['fold']:>4} {f['accuracy']:6.3f} {f['auc']:6.3f} {f['precision']:6.3f} "
                     f"{f['recall']:6.3f} {f['n_test']:>4}")
    m = d["mean"]
    lines.append(f"{'mean':>4} {m['accuracy']:6.3f} {m['auc']:6.3f} {m['precision']:6.3f} {m['recall']:6.3f}")
    rho = "n/a" if d["rho"] is None else f"{d['rho']:.3f}"
    lines.append(f"spearman rho vs severity ({d['rho_pooling']}): {rho}")
    print("\n".join(lines))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="msfusion", description=__doc__.split("\n")[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", metavar="{synth,extract,train-ae,features,train-clf,evaluate,report}")
    sub.required = True

    def common(sp, manifest=True, experiment=True):
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--seed", type=int, default=None, help="seed for all randomness")
        if manifest:
            sp.add_argument("--manifest", required=manifest is True, help="CSV manifest")
        if experiment:
            sp.add_argument("--config", help="INI experiment config")
            sp.add_argument("--fusion", choices=["none", "early", "late", "multispectral"])
            sp.add_argument("--branches", type=int, choices=[1, 2, 3])
            sp.add_argument("--classifier", choices=["svm", "mlp"])

    sp = sub.add_parser("synth", help="generate a synthetic DDK corpus")
    common(sp, manifest=False, experiment=False)
    sp.add_argument("--speakers", type=int, default=40, help="total speakers, half of them patients")
    sp.add_argument("--utterances", type=int, default=1)
    sp.add_argument("--duration", type=float, default=3.0, help="seconds per utterance")
    sp.add_argument("--cues", choices=CUE_MODES, default="all",
                    help="'split' gives each patient only one of the pitch or burst cues")
    sp.add_argument("--background", action="store_true", help="healthy-only corpus for autoencoder training")
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("extract", help="segment audio and compute time-frequency images")
    common(sp)
    sp.set_defaults(func=cmd_extract)

    sp = sub.add_parser("train-ae", help="train autoencoders on a background corpus")
    common(sp, manifest="optional")
    sp.set_defaults(func=cmd_train_ae)

    sp = sub.add_parser("features", help="bottleneck and reconstruction-error features")
    common(sp)
    sp.add_argument("--models", help="directory holding ae_*.mspc (default: --out)")
    sp.set_defaults(func=cmd_features)

    sp = sub.add_parser("train-clf", help="fit a classifier on extracted features")
    common(sp)
    sp.add_argument("--features", required=True, help="features.npz from the features subcommand")
    sp.set_defaults(func=cmd_train_clf)

    sp = sub.add_parser("evaluate", help="full nested cross-validation experiment")
    common(sp)
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("report", help="print a stored report")
    sp.add_argument("report", help="report.json or the directory holding it")
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ValueError, OSError, archive.ArchiveError, dsp.AudioError, KeyError) as exc:
        print(f"msfusion {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
