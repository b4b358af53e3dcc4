"""Command-line front end.

Every subcommand exits 0 on success, 2 on validation errors, 3 on pipeline
errors and 4 on IO errors, printing ``error: <Code>: <message>`` to stderr.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import io, metrics, phantom
from .core import View, validate_acquisition
from .errors import (
    EmptyDataset,
    InvalidConfig,
    IoError,
    LengthMismatch,
    MissingFile,
    NoUsableFrames,
    ParseError,
    ReperfqError,
)
from .phases import classify, load_model, phase_boundaries, save_model, train
from .projection import minip
from .quantification import PipelineConfig, colormaps, combine_views, complete_pairs, score_view
from .registration import _map, kept_indices, motion_correct
from .segmentation import render_colormap, segment_minip

REFERENCE_CORPUS_SIZE = 40


def reference_model(seed=0):
    """Phase model trained on the default phantom corpus."""
    return train(phantom.corpus(REFERENCE_CORPUS_SIZE, seed=seed), rng_seed=seed)


def _load_config(args):
    cfg = PipelineConfig()
    if getattr(args, "config", None):
        cfg = PipelineConfig.from_dict(io.read_json(args.config))
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    if getattr(args, "model", None):
        cfg = replace(cfg, model=str(args.model))
    if getattr(args, "atlas_dir", None):
        cfg = replace(cfg, atlas_dir=str(args.atlas_dir))
    return cfg


def _model_for(cfg):
    return load_model(cfg.model) if cfg.model else reference_model(cfg.seed)


def _labels_for(args, acq):
    labels = io.load_labels(args.labels)
    if len(labels) != len(acq.frames):
        raise ParseError(f"{args.labels}: {len(labels)} labels for {len(acq.frames)} frames")
    return labels


def load_atlases(atlas_dir):
    """Read ``*_image.pgm`` / ``*_mask.pgm`` pairs in name order."""
    atlas_dir = Path(atlas_dir)
    if not atlas_dir.is_dir():
        raise MissingFile(f"atlas directory {atlas_dir} does not exist")
    out = []
    for img_path in sorted(atlas_dir.glob("*_image.pgm")):
        mask_path = img_path.with_name(img_path.name[: -len("_image.pgm")] + "_mask.pgm")
        if not mask_path.is_file():
            raise MissingFile(f"atlas {img_path.name} has no mask {mask_path.name}")
        out.append((io.load_frame(img_path), io.load_mask(mask_path)))
    return out


def save_atlases(atlases, atlas_dir):
    atlas_dir = Path(atlas_dir)
    atlas_dir.mkdir(parents=True, exist_ok=True)
    for i, (img, mask) in enumerate(atlases):
        io.save_image(img.pixels, atlas_dir / f"atlas_{i:02d}_image.pgm", bits=16)
        io.save_mask(mask, atlas_dir / f"atlas_{i:02d}_mask.pgm")


# --- subcommands ------------------------------------------------------------

def cmd_phases(args):
    cfg = _load_config(args)
    acq = validate_acquisition(io.load_acquisition(args.manifest))
    seq = classify(_model_for(cfg), acq)
    labels = [int(v) for v in seq.labels]
    if args.out:
        io.save_labels(labels, args.out)
    else:
        print(json.dumps(labels))


def cmd_motion(args):
    cfg = _load_config(args)
    acq = io.load_acquisition(args.manifest)
    labels = _labels_for(args, acq)
    corrected = motion_correct(acq, labels, cfg.motion_registration)
    out_dir = Path(args.out_dir)
    io.save_acquisition(corrected, out_dir, bits=16)
    io.save_labels([int(labels[i]) for i in kept_indices(labels)], out_dir / "labels.json")


def cmd_minip(args):
    acq = io.load_acquisition(args.manifest)
    frames = acq.frames
    if args.labels:
        labels = _labels_for(args, acq)
        frames = [frames[i] for i in kept_indices(labels)]
        if not frames:
            raise NoUsableFrames("no arterial or parenchymal frames to project")
    io.save_image(minip(frames).pixels, args.out, bits=16)


def cmd_segment(args):
    cfg = _load_config(args)
    image = io.load_frame(args.image)
    seg = segment_minip(image, cfg.frangi)
    if args.out_map:
        io.save_rgb(render_colormap(seg), args.out_map)
    counts = seg.counts()
    if args.out_json:
        io.write_json(args.out_json, counts)
    else:
        print(json.dumps(counts))


def _emit_colormaps(out_dir, view, details):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    maps = colormaps(details["pre"].segmentation, details["post"].segmentation, details["quant"])
    for stage, rgb in maps.items():
        io.save_rgb(rgb, out_dir / f"{view.value}_{stage}.png")


def cmd_score(args):
    cfg = _load_config(args)
    if cfg.atlas_dir is None:
        raise InvalidConfig("an atlas directory is required (--atlas-dir or config atlas_dir)")
    atlases = load_atlases(cfg.atlas_dir)
    model = _model_for(cfg)
    given = {View.AP: (args.pre_ap, args.post_ap), View.LATERAL: (args.pre_lat, args.post_lat)}
    acqs = {v: tuple(None if p is None else validate_acquisition(io.load_acquisition(p)) for p in pair)
            for v, pair in given.items()}
    pairs = complete_pairs(acqs)
    views = [v for v in View if v in pairs]

    def run(view):
        return score_view(*pairs[view], atlases, model, cfg, return_details=True)

    results = _map(run, views) if views else []
    if args.emit_colormaps:
        for view, (_, details) in zip(views, results):
            _emit_colormaps(args.emit_colormaps, view, details)
    patient = pairs[views[0]][0].patient_id if views else ""
    report = combine_views([r for r, _ in results], patient, cfg.seed)
    io.save_report(report, args.out)


def _truth(case, view):
    return {
        "view": view.value,
        "reperfused_fraction": case.f,
        "territory_pixels": int(case.territory.sum()),
        "reperfused_pixels": int(case.reperfused.sum()),
        "mask_pixels": int(case.mask.inside.sum()),
    }


def cmd_synth(args):
    spec = phantom.PhantomSpec.from_dict(io.read_json(args.spec))
    out = Path(args.out_dir)
    cases = phantom.generate_patient(spec, tuple(args.views))
    truth = {"patient_id": spec.patient_id, "seed": spec.rng_seed, "views": []}
    for view, case in cases.items():
        base = out / view.value
        io.save_acquisition(case.pre, base / "pre", labels=case.labels_pre)
        io.save_acquisition(case.post, base / "post", labels=case.labels_post)
        io.save_mask(case.mask, base / "mask.pgm")
        if case.territory.any():
            io.save_mask(case.territory, base / "territory.pgm")
        truth["views"].append(_truth(case, view))
    if args.atlases > 0:
        save_atlases(phantom.make_atlases(args.atlases, spec.width, spec.height), out / "atlases")
    io.write_json(out / "truth.json", truth)


def _find_corpus(corpus_dir):
    corpus_dir = Path(corpus_dir)
    if not corpus_dir.is_dir():
        raise MissingFile(f"corpus directory {corpus_dir} does not exist")
    dataset = []
    for path in sorted(corpus_dir.rglob("manifest.json")):
        acq, labels = io.load_acquisition(path, with_labels=True)
        if labels is not None:
            dataset.append((acq, labels))
    if not dataset:
        raise EmptyDataset(f"no labelled manifests under {corpus_dir}")
    return dataset


def cmd_train(args):
    if args.corpus_dir:
        dataset = _find_corpus(args.corpus_dir)
    else:
        dataset = phantom.corpus(args.synthetic, seed=args.seed)
    save_model(train(dataset, rng_seed=args.seed), args.out)


def _label_sets(path):
    data = io.read_json(path)
    if isinstance(data, list) and data and all(isinstance(x, list) for x in data):
        return [np.asarray(x, dtype=np.int64) for x in data]
    return [io.load_labels(path)]


def cmd_eval(args):
    if args.outcomes:
        result = metrics.outcome_metrics(metrics.read_outcomes(args.outcomes),
                                         n_permutations=args.permutations, seed=args.seed)
    else:
        if not (args.pred_labels and args.ref_labels):
            raise InvalidConfig("eval needs --pred-labels with --ref-labels, or --outcomes")
        pred, ref = _label_sets(args.pred_labels), _label_sets(args.ref_labels)
        if len(pred) != len(ref):
            raise LengthMismatch("prediction and reference files hold different sequence counts")
        flat_p, flat_r = np.concatenate(pred), np.concatenate(ref)
        offsets = metrics.boundary_offsets([phase_boundaries(p) for p in pred],
                                           [phase_boundaries(r) for r in ref])
        result = {
            "n_frames": int(flat_r.size),
            "n_sequences": len(ref),
            "accuracy": metrics.average_accuracy(flat_p, flat_r),
            "weighted_f1": metrics.weighted_f1(flat_p, flat_r),
            "boundary_offsets": offsets.to_dict(),
        }
    result["seed"] = args.seed
    io.write_json(args.out, result)


# --- parser -----------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="reperfq", description="Automatic reperfusion scoring from angiographic sequences.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, model=False):
        sp.add_argument("--config", type=Path, help="pipeline config JSON")
        sp.add_argument("--seed", type=int, help="overrides the config seed (default 0)")
        if model:
            sp.add_argument("--model", type=Path, help="phase model JSON; default trains a phantom reference model")

    sp = sub.add_parser("phases", help="predict and decode frame phases")
    sp.add_argument("manifest", type=Path)
    sp.add_argument("--out", type=Path)
    common(sp, model=True)
    sp.set_defaults(func=cmd_phases)

    sp = sub.add_parser("motion", help="motion-correct arterial and parenchymal frames")
    sp.add_argument("manifest", type=Path)
    sp.add_argument("--labels", type=Path, required=True)
    sp.add_argument("--out-dir", type=Path, required=True)
    common(sp)
    sp.set_defaults(func=cmd_motion)

    sp = sub.add_parser("minip", help="minimum-intensity projection")
    sp.add_argument("manifest", type=Path)
    sp.add_argument("--labels", type=Path, help="project only arterial and parenchymal frames")
    sp.add_argument("--out", type=Path, required=True)
    sp.set_defaults(func=cmd_minip)

    sp = sub.add_parser("segment", help="vessel / perfused / non-perfused segmentation")
    sp.add_argument("image", type=Path)
    sp.add_argument("--out-map", type=Path)
    sp.add_argument("--out-json", type=Path)
    common(sp)
    sp.set_defaults(func=cmd_segment)

    sp = sub.add_parser("score", help="full autoTICI pipeline")
    for name in ("pre-ap", "post-ap", "pre-lat", "post-lat"):
        sp.add_argument(f"--{name}", type=Path)
    sp.add_argument("--atlas-dir", type=Path)
    sp.add_argument("--out", type=Path, required=True)
    sp.add_argument("--emit-colormaps", type=Path, metavar="DIR")
    common(sp, model=True)
    sp.set_defaults(func=cmd_score)

    sp = sub.add_parser("synth", help="generate a phantom patient")
    sp.add_argument("spec", type=Path)
    sp.add_argument("--out-dir", type=Path, required=True)
    sp.add_argument("--views", nargs="+", default=["AP", "lateral"], choices=["AP", "lateral"])
    sp.add_argument("--atlases", type=int, default=3, help="number of atlases to write (default 3)")
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("train", help="train a phase model")
    src = sp.add_mutually_exclusive_group(required=True)
    src.add_argument("--corpus-dir", type=Path)
    src.add_argument("--synthetic", type=int, metavar="N", help="train on N generated phantom sequences")
    sp.add_argument("--out", type=Path, required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="label or outcome metrics")
    sp.add_argument("--pred-labels", type=Path)
    sp.add_argument("--ref-labels", type=Path)
    sp.add_argument("--outcomes", type=Path)
    sp.add_argument("--out", type=Path, required=True)
    sp.add_argument("--permutations", type=int, default=10000)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_eval)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except ReperfqError as exc:
        print(f"error: {exc.code}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {IoError.__name__}: {exc}", file=sys.stderr)
        return IoError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
