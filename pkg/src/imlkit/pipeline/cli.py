"""Command-line surface for the toolkit.

Exit codes: 0 success, 1 usage error, 2 data error, 3 model error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import torch

from ..corrdino import CorrDino, CorrDinoConfig, load_corrdino, save_corrdino
from ..dass import DASSModel, load_dass, save_dass
from ..errors import DataError, ImlkitError, ModelError
from ..images import ImageTensor, random_photo, save_mask_png
from ..jitter import CcLabelProvider, apply_object_jitter
from ..errors import JitterSkip
from ..pairs import PairClassifier, synthesize_sdg_pair, synthesize_spg_pair
from ..qes import QESConfig, filter_annotations
from ..webiml import WebIML, WebIMLConfig, load_webiml, save_webiml
from .annotate import AnnotatorModels, annotate_pair
from .data import load_image_mask_samples, load_pair_samples
from .evaluate import evaluate
from .hashing import md5_hex, phash
from .manifest import AnnotationRecord, build_manifest, load_manifest
from .training import TrainConfig, train

USAGE_EXIT = 1
DATA_EXIT = 2
MODEL_EXIT = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(USAGE_EXIT)


def _list_images(directory: Path) -> list[Path]:
    paths = sorted(p for p in directory.iterdir()
                   if p.suffix.lower() in (".png", ".jpg", ".jpeg"))
    if not paths:
        raise DataError(f"no images found in {directory}")
    return paths


def _train_config(args) -> TrainConfig:
    return TrainConfig(
        iterations=args.iterations, batch_size=args.batch_size,
        input_side=args.input_side, lr_start=args.lr_start, lr_end=args.lr_end,
        seed=args.seed, checkpoint_every=args.checkpoint_every)


def _add_train_flags(sub, iterations=2000, batch=4, side=256):
    sub.add_argument("--iterations", type=int, default=iterations)
    sub.add_argument("--batch-size", type=int, default=batch)
    sub.add_argument("--input-side", type=int, default=side)
    sub.add_argument("--lr-start", type=float, default=1e-4)
    sub.add_argument("--lr-end", type=float, default=1e-6)
    sub.add_argument("--seed", type=int, default=0)
    sub.add_argument("--checkpoint-every", type=int, default=1000)
    sub.add_argument("--checkpoint-dir", default=None)
    sub.add_argument("--out", required=True, help="final checkpoint path")


def cmd_synth_pairs(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(args.seed)
    if args.images:
        sources = [ImageTensor.load(p) for p in _list_images(Path(args.images))]
    else:
        sources = [random_photo(rng, args.side, args.side) for _ in range(max(8, args.count))]
    records = []
    for i in range(args.count):
        kind = args.kind
        if kind == "mixed":
            kind = "spg" if rng.random() < 0.5 else "sdg"
        a = sources[int(rng.integers(len(sources)))]
        b = sources[int(rng.integers(len(sources)))]
        if kind == "spg":
            pair = synthesize_spg_pair(a, rng, donor=b)
        else:
            pair = synthesize_sdg_pair(a, b, rng)
        stem = f"pair_{i:05d}"
        probe_path = out / f"{stem}_probe.png"
        ref_path = out / f"{stem}_ref.png"
        mask_path = out / f"{stem}_mask.png"
        pair.probe.save(probe_path)
        pair.reference.save(ref_path)
        save_mask_png(pair.gt_mask.astype(np.float32), mask_path)
        records.append(AnnotationRecord(
            id=stem, probe_path=str(probe_path), reference_path=str(ref_path),
            group=pair.group.value, mask_path=str(mask_path), qes=1.0, retained=True,
            md5=md5_hex(pair.probe), phash=f"{phash(pair.probe):016x}",
            source="synthetic"))
    build_manifest(records, out / "manifest.jsonl")
    print(f"wrote {len(records)} pairs to {out}")
    return 0


def cmd_train_classifier(args) -> int:
    samples = load_pair_samples(args.manifest, require_mask=False, side=args.input_side)
    model = PairClassifier(input_side=min(128, args.input_side))
    torch.manual_seed(args.seed)
    result = train(model, "classifier", [(samples, 1.0)], _train_config(args),
                   out_dir=args.checkpoint_dir)
    torch.save({"kind": "classifier", "input_side": model.input_side,
                "state": model.state_dict()}, args.out)
    print(f"trained classifier for {result.steps} steps; final loss {result.losses[-1]:.4f}")
    return 0


def cmd_train_dass(args) -> int:
    samples = load_pair_samples(args.manifest, group="SPG", side=args.input_side)
    torch.manual_seed(args.seed)
    model = DASSModel()
    result = train(model, "dass", [(samples, 1.0)], _train_config(args),
                   out_dir=args.checkpoint_dir)
    save_dass(model, args.out)
    print(f"trained dass for {result.steps} steps; final loss {result.losses[-1]:.4f}")
    return 0


def cmd_train_corrdino(args) -> int:
    samples = load_pair_samples(args.manifest, group="SDG", side=args.input_side)
    torch.manual_seed(args.seed)
    model = CorrDino(CorrDinoConfig(backend=args.backend, input_side=args.input_side,
                                    k=args.k, d=args.d))
    result = train(model, "corrdino", [(samples, 1.0)], _train_config(args),
                   out_dir=args.checkpoint_dir)
    save_corrdino(model, args.out)
    print(f"trained corr-dino for {result.steps} steps; final loss {result.losses[-1]:.4f}")
    return 0


def cmd_annotate(args) -> int:
    clf_payload = torch.load(args.classifier, map_location="cpu", weights_only=False)
    if clf_payload.get("kind") != "classifier":
        raise ModelError(f"not a classifier checkpoint: {args.classifier}")
    classifier = PairClassifier(input_side=clf_payload["input_side"])
    classifier.load_state_dict(clf_payload["state"])
    models = AnnotatorModels(classifier=classifier, dass=load_dass(args.dass),
                             corrdino=load_corrdino(args.corrdino))
    cfg = QESConfig(keep_threshold=args.keep_threshold)
    records = []
    with open(args.pairs, "r", encoding="utf-8") as fh:
        lines = [line.split() for line in fh if line.strip()]
    for i, parts in enumerate(lines):
        if len(parts) != 2:
            raise DataError(f"pairs file line {i + 1}: expected 'probe_path reference_path'")
        probe = ImageTensor.load(parts[0])
        reference = ImageTensor.load(parts[1])
        records.append(annotate_pair(
            probe, reference, models, cfg, probe_path=parts[0], reference_path=parts[1],
            mask_dir=args.mask_dir, persist_all=args.persist_all,
            source="annotate", record_id=f"ann_{i:06d}"))
    build_manifest(records, args.out_manifest, qes_config=cfg)
    kept = sum(r.retained for r in records)
    print(f"annotated {len(records)} pairs; retained {kept}")
    return 0


def cmd_qes_filter(args) -> int:
    records, _ = load_manifest(args.manifest)
    cfg = QESConfig(t_high=args.t_high, t_low=args.t_low, keep_threshold=args.keep_threshold)
    scored = [r for r in records if r.status == "ok"]
    retained = filter_annotations(scored, cfg)
    build_manifest(records, args.out, qes_config=cfg)
    print(f"scored {len(scored)} records; retained {len(retained)} at QES > {cfg.keep_threshold}")
    return 0


def cmd_jitter(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(args.seed)
    provenance_path = out / "provenance.jsonl"
    written = 0
    with provenance_path.open("w", encoding="utf-8") as prov:
        if args.images:
            images = []
            for path in _list_images(Path(args.images)):
                label_path = Path(args.labels) / f"{path.stem}.png" if args.labels else None
                images.append((path.stem, ImageTensor.load(path), label_path))
            for stem, image, label_path in images:
                if label_path is None or not label_path.is_file():
                    raise DataError(f"missing label image for {stem}")
                import cv2
                labels = cv2.imread(str(label_path), cv2.IMREAD_UNCHANGED)
                provider = CcLabelProvider(labels)
                written += _emit_jitter(image, provider, rng, out, stem, prov)
        else:
            for i in range(args.count):
                image, labels = random_photo(rng, args.side, args.side, with_labels=True)
                provider = CcLabelProvider(labels)
                written += _emit_jitter(image, provider, rng, out, f"jit_{i:05d}", prov)
    print(f"wrote {written} jittered images to {out}")
    return 0


def _emit_jitter(image, provider, rng, out: Path, stem: str, prov) -> int:
    try:
        record = apply_object_jitter(image, provider, rng)
    except JitterSkip:
        return 0
    record.forged.save(out / f"{stem}.png")
    save_mask_png(record.gt_mask.astype(np.float32), out / f"{stem}_mask.png")
    prov.write(json.dumps({"id": stem, "ops": record.ops_applied}, default=str) + "\n")
    return 1


def cmd_train_webiml(args) -> int:
    datasets = []
    for spec in args.data:
        parts = spec.rsplit(":", 1)
        ratio = 1.0
        if len(parts) == 2:
            try:
                ratio = float(parts[1])
                spec = parts[0]
            except ValueError:
                pass
        datasets.append((load_image_mask_samples(spec, side=args.input_side), ratio))
    torch.manual_seed(args.seed)
    model = WebIML(WebIMLConfig(backend=args.backend, width=args.width, rounds=args.rounds))
    result = train(model, "webiml", datasets, _train_config(args),
                   out_dir=args.checkpoint_dir)
    save_webiml(model, args.out)
    print(f"trained web-iml for {result.steps} steps; final loss {result.losses[-1]:.4f}")
    return 0


def cmd_evaluate(args) -> int:
    model = load_webiml(args.checkpoint)
    dataset = load_image_mask_samples(args.data, side=args.input_side)
    perturbation = None
    if args.perturb:
        if "=" not in args.perturb:
            raise DataError("--perturb expects kind=param (e.g. jpeg=50)")
        kind, param = args.perturb.split("=", 1)
        perturbation = (kind, float(param))
    report = evaluate(model.predict, dataset, perturbation=perturbation,
                      threshold=args.threshold)
    text = report.render()
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    print(text)
    return 0


def cmd_manifest_validate(args) -> int:
    records, cfg = load_manifest(args.manifest)
    kept = sum(r.retained for r in records)
    print(f"manifest ok: {len(records)} records, {kept} retained, "
          f"keep_threshold={cfg.keep_threshold}")
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="imlkit", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-pairs", help="synthesize SPG/SDG training pairs")
    p.add_argument("--images", default=None, help="source image directory (default: generated)")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--kind", choices=("spg", "sdg", "mixed"), default="mixed")
    p.add_argument("--side", type=int, default=256)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_synth_pairs)

    p = sub.add_parser("train-classifier", help="train the SPG/SDG router")
    p.add_argument("--manifest", required=True)
    _add_train_flags(p, iterations=500, batch=16, side=160)
    p.set_defaults(fn=cmd_train_classifier)

    p = sub.add_parser("train-dass", help="train the difference-aware segmenter")
    p.add_argument("--manifest", required=True)
    _add_train_flags(p)
    p.set_defaults(fn=cmd_train_dass)

    p = sub.add_parser("train-corrdino", help="train the correlation localizer")
    p.add_argument("--manifest", required=True)
    p.add_argument("--backend", default="stub")
    p.add_argument("--k", type=int, default=16)
    p.add_argument("--d", type=int, default=32)
    _add_train_flags(p, side=112)
    p.set_defaults(fn=cmd_train_corrdino)

    p = sub.add_parser("annotate", help="auto-annotate probe/reference pairs")
    p.add_argument("--pairs", required=True, help="text file: probe_path reference_path per line")
    p.add_argument("--classifier", required=True)
    p.add_argument("--dass", required=True)
    p.add_argument("--corrdino", required=True)
    p.add_argument("--out-manifest", required=True)
    p.add_argument("--mask-dir", required=True)
    p.add_argument("--persist-all", action="store_true")
    p.add_argument("--keep-threshold", type=float, default=0.5)
    p.set_defaults(fn=cmd_annotate)

    p = sub.add_parser("qes-filter", help="re-score and filter a manifest by QES")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--t-high", type=float, default=QESConfig().t_high)
    p.add_argument("--t-low", type=float, default=QESConfig().t_low)
    p.add_argument("--keep-threshold", type=float, default=0.5)
    p.set_defaults(fn=cmd_qes_filter)

    p = sub.add_parser("jitter", help="offline object-jitter synthesis")
    p.add_argument("--images", default=None, help="image directory (default: generated)")
    p.add_argument("--labels", default=None, help="label-image directory for cc-labels")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--side", type=int, default=256)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_jitter)

    p = sub.add_parser("train-webiml", help="train the single-image localizer")
    p.add_argument("--data", action="append", required=True,
                   help="jitter dir or manifest path, optional :ratio suffix")
    p.add_argument("--backend", default="cnn")
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--rounds", type=int, default=2)
    _add_train_flags(p)
    p.set_defaults(fn=cmd_train_webiml)

    p = sub.add_parser("evaluate", help="evaluate a web-iml checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--perturb", default=None, help="kind=param (resize/blur/jpeg)")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--input-side", type=int, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("manifest-validate", help="schema-validate a manifest")
    p.add_argument("--manifest", required=True)
    p.set_defaults(fn=cmd_manifest_validate)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return DATA_EXIT
    except ModelError as exc:
        print(f"model error: {exc}", file=sys.stderr)
        return MODEL_EXIT
    except ImlkitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DATA_EXIT


if __name__ == "__main__":
    sys.exit(main())
