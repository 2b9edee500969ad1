"""Command-line interface: ``evidence3 <subcommand> ...``.

Manifests are JSONL files with one record per image. Image paths inside a
manifest are relative to the manifest's directory. All files are written
atomically (temporary file, then rename) and numeric JSON output uses
Python's shortest round-trip float formatting, so reruns with the same flags
produce byte-identical artifacts.

Exit codes: 0 success, 2 I/O error, 3 calibration or validation error,
4 training error.
"""

import argparse
import io
import json
import logging
import os
import sys
import tempfile
from dataclasses import dataclass, replace

import numpy as np
from PIL import Image

from . import vlatoy
from ._parallel import pmap
from .evidence import Evidence3Detector
from .exceptions import CalibrationError, EvaluationError, TrainingError
from .explain import (
    causes_for_spec,
    explanation_class,
    load_templates,
    reference_explanation,
    render_cue,
    render_explanation,
)
from .imgcore import from_uint8, to_uint8
from .perturb import CLEAN, PerturbationSpec, SamplerConfig, apply_perturbation, mix_seed, sample_spec

EXIT_OK = 0
EXIT_IO = 2
EXIT_INVALID = 3
EXIT_TRAINING = 4

SPLITS = ("train", "eval")

# which transforms count as ground truth for each flag in detection summaries
FLAG_TARGETS = {"color": ("color",), "noise": ("noise",), "spatial": ("noise",)}

log = logging.getLogger("evidence3")


class CliError(Exception):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------------------
# file helpers


def atomic_write(path, data):
    """Write ``data`` (bytes or str) to ``path`` via a temp file and rename."""
    if isinstance(data, str):
        data = data.encode("utf-8")
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dumps(obj):
    return json.dumps(obj, sort_keys=False, allow_nan=False)


def read_image(path):
    """Load a PNG or binary PPM as a float (H, W, 3) array in [0, 1]."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    except (OSError, ValueError) as exc:
        raise CliError(f"cannot read image {path}: {exc}", EXIT_IO) from exc
    return from_uint8(arr)


def encode_image(img, fmt="PNG"):
    buf = io.BytesIO()
    Image.fromarray(to_uint8(img), mode="RGB").save(buf, format=fmt)
    return buf.getvalue()


def write_image(path, img):
    fmt = "PPM" if path.lower().endswith(".ppm") else "PNG"
    atomic_write(path, encode_image(img, fmt))


# ---------------------------------------------------------------------------
# manifests


@dataclass(frozen=True)
class ManifestRecord:
    image_path: str
    instruction: str
    action_now: tuple
    action_next: tuple
    split: str = "train"
    spec: PerturbationSpec = None
    clean_path: str = None
    explanation_ref: str = ""
    # False when the record carries no "spec" key at all (ground truth unknown)
    spec_known: bool = True

    def __post_init__(self):
        for name in ("action_now", "action_next"):
            vec = tuple(float(x) for x in getattr(self, name))
            if len(vec) != vlatoy.ACTION_DIM:
                raise ValueError(f"{name} must have {vlatoy.ACTION_DIM} entries")
            object.__setattr__(self, name, vec)
        if self.split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}, got {self.split!r}")
        for name in ("image_path", "clean_path"):
            p = getattr(self, name)
            if p is not None and (os.path.isabs(p) or not p):
                raise ValueError(f"{name} must be a non-empty relative path")

    @property
    def is_clean(self):
        return self.spec is None or self.spec.is_clean

    def to_dict(self):
        d = {
            "image_path": self.image_path,
            "clean_path": self.clean_path,
            "instruction": self.instruction,
            "action_now": list(self.action_now),
            "action_next": list(self.action_next),
        }
        if self.spec_known:
            d["spec"] = None if self.spec is None else self.spec.to_dict()
        d["explanation_ref"] = self.explanation_ref
        d["split"] = self.split
        return d

    @classmethod
    def from_dict(cls, d):
        spec_known = "spec" in d
        spec = d.get("spec")
        return cls(
            image_path=d["image_path"],
            instruction=d["instruction"],
            action_now=d["action_now"],
            action_next=d["action_next"],
            split=d.get("split", "train"),
            spec=None if spec is None else PerturbationSpec.from_dict(spec),
            clean_path=d.get("clean_path"),
            explanation_ref=d.get("explanation_ref", ""),
            spec_known=spec_known,
        )


def read_manifest(path):
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise CliError(f"cannot read manifest {path}: {exc}", EXIT_IO) from exc
    records = []
    for no, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            records.append(ManifestRecord.from_dict(json.loads(line)))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise CliError(f"{path}:{no}: invalid manifest record: {exc}", EXIT_INVALID) from exc
    return records


def write_manifest(path, records):
    atomic_write(path, "".join(dumps(r.to_dict()) + "\n" for r in records))


def resolve(manifest_path, rel):
    return os.path.join(os.path.dirname(os.path.abspath(manifest_path)), rel)


# ---------------------------------------------------------------------------
# config


def load_config(path):
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            cfg = json.load(fh)
    except OSError as exc:
        raise CliError(f"cannot read config {path}: {exc}", EXIT_IO) from exc
    except json.JSONDecodeError as exc:
        raise CliError(f"config {path} is not valid JSON: {exc}", EXIT_INVALID) from exc
    if not isinstance(cfg, dict):
        raise CliError("config must be a JSON object", EXIT_INVALID)
    return cfg


def sampler_from(cfg):
    try:
        return SamplerConfig.from_dict(cfg.get("sampler", {}))
    except (TypeError, ValueError) as exc:
        raise CliError(f"invalid sampler config: {exc}", EXIT_INVALID) from exc


def detector_from(args, cfg):
    params = dict(cfg.get("detector", {}))
    for key in ("quantile", "cutoff_frac", "win", "bins"):
        value = getattr(args, key, None)
        if value is not None:
            params[key] = value
    try:
        return Evidence3Detector(**params)
    except TypeError as exc:
        raise CliError(f"invalid detector config: {exc}", EXIT_INVALID) from exc


def load_detector(path):
    try:
        return Evidence3Detector.load(path)
    except OSError as exc:
        raise CliError(f"cannot read stats file {path}: {exc}", EXIT_IO) from exc
    except (json.JSONDecodeError, ValueError) as exc:
        raise CliError(f"invalid stats file {path}: {exc}", EXIT_INVALID) from exc


# ---------------------------------------------------------------------------
# commands


def cmd_generate(args, cfg):
    """Render ``n`` clean synthetic scenes and write their manifest."""
    out_dir = os.path.dirname(os.path.abspath(args.out))
    img_dir = args.image_dir

    def one(i):
        s = vlatoy.gen_sample(mix_seed(args.seed, i))
        rel = os.path.join(img_dir, f"{args.split}_{i:05d}.png")
        write_image(os.path.join(out_dir, rel), s.image)
        return ManifestRecord(
            image_path=rel, instruction=s.instruction, action_now=s.action_now,
            action_next=s.action_next, split=args.split, spec=None,
            explanation_ref=load_templates()["clean"],
        )

    records = pmap(one, range(args.n))
    write_manifest(args.out, records)
    log.info("wrote %d clean records to %s", len(records), args.out)
    return EXIT_OK


def cmd_calibrate(args, cfg):
    records = read_manifest(args.manifest)
    clean = [r for r in records if r.spec_known and r.is_clean]
    if len(clean) < 2:
        raise CliError(f"need at least 2 clean records, found {len(clean)}", EXIT_INVALID)
    images = pmap(lambda r: read_image(resolve(args.manifest, r.image_path)), clean)
    detector = detector_from(args, cfg)
    try:
        detector.fit(images)
    except ValueError as exc:
        raise CliError(f"calibration failed: {exc}", EXIT_INVALID) from exc
    atomic_write(args.out, json.dumps(detector.to_dict(), indent=2) + "\n")
    log.info("calibrated on %d clean images -> %s", len(clean), args.out)
    return EXIT_OK


def _explanation_ref(spec, detector, img):
    if detector is not None:
        return reference_explanation(spec, detector.report(img)).text
    causes = causes_for_spec(spec)
    templates = load_templates()
    if not causes:
        return templates["clean"]
    # metric values unknown without calibration stats; keep the placeholders
    return " ".join(templates[c] for c in ("color", "noise", "spatial") if c in causes)


def cmd_perturb(args, cfg):
    """Write every input record plus one perturbed variant of it."""
    records = read_manifest(args.manifest)
    sampler = replace(sampler_from(cfg), p_clean=0.0)
    detector = load_detector(args.stats) if args.stats else None
    out_dir = os.path.dirname(os.path.abspath(args.out))
    created = []

    def rel_to_out(rec_path):
        return os.path.relpath(resolve(args.manifest, rec_path), out_dir)

    def one(item):
        i, rec = item
        img = read_image(resolve(args.manifest, rec.image_path))
        spec = sample_spec(sampler, mix_seed(args.seed, i))
        pert = apply_perturbation(img, spec)
        stem = os.path.splitext(os.path.basename(rec.image_path))[0]
        rel = os.path.join(args.image_dir, f"{i:05d}_{stem}.png")
        path = os.path.join(out_dir, rel)
        created.append(path)
        write_image(path, pert)
        # score what is stored on disk so references match later detection
        stored = from_uint8(to_uint8(pert))
        clean_rec = replace(rec, image_path=rel_to_out(rec.image_path),
                            clean_path=None if rec.clean_path is None else rel_to_out(rec.clean_path))
        variant = replace(rec, image_path=rel, clean_path=clean_rec.image_path, spec=spec,
                          spec_known=True, explanation_ref=_explanation_ref(spec, detector, stored))
        return [clean_rec, variant]

    try:
        pairs = pmap(one, list(enumerate(records)))
        write_manifest(args.out, [r for pair in pairs for r in pair])
    except BaseException:
        for path in created:
            if os.path.exists(path):
                os.unlink(path)
        raise
    log.info("wrote %d records to %s", 2 * len(records), args.out)
    return EXIT_OK


def _rate(hits, total):
    return None if total == 0 else hits / total


def detection_summary(records, flags):
    """Per-flag TPR (against the flag's target transforms) and FPR on clean records."""
    summary = {"n_records": len(records)}
    if not records or not all(r.spec_known for r in records):
        return summary
    active = [set() if r.spec is None else set(r.spec.active) for r in records]
    n_clean = sum(1 for a in active if not a)
    summary["n_clean"] = n_clean
    tpr, fpr = {}, {}
    for k, flag in enumerate(("color", "noise", "spatial")):
        pos = [f[k] for f, a in zip(flags, active) if a & set(FLAG_TARGETS[flag])]
        neg = [f[k] for f, a in zip(flags, active) if not a]
        tpr[flag] = _rate(sum(pos), len(pos))
        fpr[flag] = _rate(sum(neg), n_clean)
    summary["tpr"] = tpr
    summary["fpr"] = fpr
    summary["targets"] = {k: list(v) for k, v in FLAG_TARGETS.items()}
    return summary


def cmd_detect(args, cfg):
    detector = load_detector(args.stats)
    records = read_manifest(args.manifest)
    images = pmap(lambda r: read_image(resolve(args.manifest, r.image_path)), records)
    try:
        reports = detector.reports(images)
    except ValueError as exc:
        raise CliError(f"cannot score images: {exc}", EXIT_INVALID) from exc
    lines = []
    for rec, rep in zip(records, reports):
        row = {
            "image_path": rec.image_path,
            "mahal": rep.d_mahal,
            "hf": rep.hf_ratio,
            "entstd": rep.ent_std,
            "flags": rep.to_dict()["flags"],
            "cue": render_cue(rep),
            "explanation": render_explanation(rep).text,
        }
        if rec.spec_known:
            row["truth_class"] = explanation_class(rec.spec or CLEAN)
        lines.append(dumps(row))
    summary = detection_summary(records, [r.flags for r in reports])
    lines.append(dumps({"summary": summary}))
    atomic_write(args.out, "\n".join(lines) + "\n")
    if "fpr" in summary:
        for flag in ("color", "noise", "spatial"):
            log.info("%-8s TPR=%s FPR=%s", flag, summary["tpr"][flag], summary["fpr"][flag])
    return EXIT_OK


def cmd_explain(args, cfg):
    detector = load_detector(args.stats)
    img = read_image(args.image)
    try:
        rep = detector.report(img)
    except ValueError as exc:
        raise CliError(f"cannot score image: {exc}", EXIT_INVALID) from exc
    if args.json:
        row = rep.to_dict()
        row["cue"] = render_cue(rep)
        row["explanation"] = render_explanation(rep).text
        print(dumps(row))
    else:
        print(render_cue(rep))
        print(render_explanation(rep).text)
    return EXIT_OK


def format_table(report):
    header = f"{'Configuration':<14}{'XAI Acc':>10}{'Current L1':>14}{'Next L1':>12}"
    rows = [header, "-" * len(header)]
    for mode, row in report["modes"].items():
        acc = "-" if row["xai_acc"] is None else f"{100 * row['xai_acc']:.2f}%"
        rows.append(f"{mode.capitalize():<14}{acc:>10}{row['current_l1']:>14.4f}{row['next_l1']:>12.4f}")
    return "\n".join(rows)


def cmd_experiment(args, cfg):
    sampler = sampler_from(cfg)
    try:
        train_cfg = vlatoy.TrainConfig(**cfg.get("train", {}))
    except (TypeError, ValueError) as exc:
        raise CliError(f"invalid train config: {exc}", EXIT_INVALID) from exc
    seeds = args.seeds if args.seeds else [args.seed + k for k in range(3)]
    try:
        report = vlatoy.run_experiments(seeds, tuple(args.sizes), train_cfg, sampler,
                                        cfg.get("detector"))
    except (TrainingError, EvaluationError, CalibrationError) as exc:
        raise CliError(f"experiment failed: {exc}", EXIT_TRAINING) from exc
    atomic_write(args.out, json.dumps(report, indent=2) + "\n")
    if not args.quiet:
        print(format_table(report))
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def u64(text):
    value = int(text, 0)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return value


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=u64, default=0, help="global seed (u64)")
    common.add_argument("--config", help="JSON config with optional sampler/train/detector sections")
    common.add_argument("--quiet", action="store_true", help="suppress informational output")

    parser = argparse.ArgumentParser(prog="evidence3", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", parents=[common], help="render clean synthetic scenes")
    p.add_argument("--out", required=True, help="output manifest (JSONL)")
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--split", choices=SPLITS, default="train")
    p.add_argument("--image-dir", default="images")
    p.set_defaults(func=cmd_generate)

    metric_flags = argparse.ArgumentParser(add_help=False)
    metric_flags.add_argument("--quantile", type=float)
    metric_flags.add_argument("--cutoff-frac", dest="cutoff_frac", type=float)
    metric_flags.add_argument("--win", type=int)
    metric_flags.add_argument("--bins", type=int)

    p = sub.add_parser("calibrate", parents=[common, metric_flags], help="fit clean statistics")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="stats file (JSON)")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("perturb", parents=[common], help="add one perturbed variant per record")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="output manifest (JSONL)")
    p.add_argument("--image-dir", default="perturbed")
    p.add_argument("--stats", help="stats file used to fill metric values in reference explanations")
    p.set_defaults(func=cmd_perturb)

    p = sub.add_parser("detect", parents=[common], help="score every record of a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--stats", required=True)
    p.add_argument("--out", required=True, help="report (JSONL, summary on the last line)")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("experiment", parents=[common], help="train and compare the three modes")
    p.add_argument("--out", required=True, help="experiment report (JSON)")
    p.add_argument("--sizes", type=int, nargs=2, default=[2000, 500], metavar=("TRAIN", "EVAL"))
    p.add_argument("--seeds", type=u64, nargs="+", help="defaults to SEED, SEED+1, SEED+2")
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("explain", parents=[common], help="cue and explanation for one image")
    p.add_argument("image")
    p.add_argument("--stats", required=True)
    p.add_argument("--json", action="store_true", help="print one JSON object instead of text")
    p.set_defaults(func=cmd_explain)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(name)s: %(message)s", stream=sys.stderr, force=True)
    try:
        cfg = load_config(args.config)
        return args.func(args, cfg)
    except CliError as exc:
        log.error("%s", exc)
        return exc.code
    except OSError as exc:
        log.error("I/O error: %s", exc)
        return EXIT_IO
    except ValueError as exc:
        log.error("invalid input: %s", exc)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
