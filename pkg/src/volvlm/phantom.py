"""Synthetic CT phantoms with exact ground truth, templated text, and the
instruction-sample dataset format.

Coordinates follow :mod:`volvlm.volume`: voxel i on an axis sits at
``i * spacing`` mm. Region names split the volume at its center:
y below center is anterior, z above center is upper, x below center is left.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .tensor import make_rng
from .volume import AIR_HU, Volume, write_rvol

log = logging.getLogger(__name__)

GENERATOR_VERSION = "1.0"

LESION_TYPES = ("nodule", "cyst", "calcification")
LESION_HU = {"nodule": 80, "cyst": -20, "calcification": 800}
BODY_HU = 40
NOISE_SIGMA = 20.0
DIAMETER_RANGE = (4, 20)
BODY_FRACTION = 0.70
PRESENCE_P = 0.5
MAX_PLACEMENT_ATTEMPTS = 100

FIELD_OF_VIEW_MM = (96.0, 96.0, 96.0)
DEFAULT_DIMS = (48, 48, 24)


def spacing_for(dims, fov=FIELD_OF_VIEW_MM):
    """Voxel spacing (mm) that makes ``dims`` cover the fixed field of view."""
    return tuple(float(f) / int(n) for f, n in zip(fov, dims))


DEFAULT_SPACING = spacing_for(DEFAULT_DIMS)

TASKS = ("report", "vqa", "diagnosis")


@dataclass(frozen=True)
class Lesion:
    type: str
    diameter_mm: float
    region: str
    center_mm: tuple = field(default=(0.0, 0.0, 0.0), compare=False)


@dataclass(frozen=True)
class PhantomFindings:
    patient_id: str
    lesions: tuple = ()

    def present(self, lesion_type) -> bool:
        return any(l.type == lesion_type for l in self.lesions)


@dataclass
class InstructionSample:
    id: str
    patient_id: str
    volume_path: str
    task: str
    question: str
    answer: str
    label: dict | None = None


SAMPLE_FIELDS = ("id", "patient_id", "volume_path", "task", "question", "answer", "label")


class SchemaError(ValueError):
    pass


# --------------------------------------------------------------------------
# geometry
# --------------------------------------------------------------------------


def region_of(center_mm, volume_center_mm) -> str:
    x, y, z = (c - m for c, m in zip(center_mm, volume_center_mm))
    ap = "anterior" if y < 0 else "posterior"
    si = "upper" if z > 0 else "lower"
    lr = "left" if x < 0 else "right"
    return f"{ap} {si} {lr}"


def _sphere_directions(n=256):
    # Fibonacci sphere
    i = np.arange(n) + 0.5
    phi = np.arccos(1 - 2 * i / n)
    theta = np.pi * (1 + 5 ** 0.5) * i
    return np.stack([np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)], axis=1)


_DIRS = _sphere_directions()


def _inside_ellipsoid(points, center, semi):
    return (((points - center) / semi) ** 2).sum(axis=-1) <= 1.0


def sphere_in_ellipsoid(c, r, e_center, semi, margin=0.5) -> bool:
    pts = np.asarray(c) + (r + margin) * _DIRS
    return bool(np.all(_inside_ellipsoid(pts, e_center, semi)))


def _place(rng, types, e_center, semi):
    placed = []
    for t in types:
        d = int(rng.integers(DIAMETER_RANGE[0], DIAMETER_RANGE[1] + 1))
        r = d / 2.0
        for _ in range(MAX_PLACEMENT_ATTEMPTS):
            c = e_center + rng.uniform(-1, 1, size=3) * semi
            if np.any(np.abs(c - e_center) < 1.0):
                continue  # keep the octant unambiguous
            if not sphere_in_ellipsoid(c, r, e_center, semi):
                continue
            if any(np.linalg.norm(c - np.asarray(o[2])) < r + o[1] / 2 + 2.0 for o in placed):
                continue
            placed.append((t, d, tuple(float(v) for v in c)))
            break
        else:
            return None
    return placed


def gen_phantom(rng, dims=DEFAULT_DIMS, spacing=DEFAULT_SPACING, patient_id="p0",
                noise_sigma=NOISE_SIGMA):
    """One synthetic volume and its findings.

    Each lesion type is present independently with probability 1/2 (so 0-3
    lesions, at most one per type). Lesions are spheres fully inside the
    body ellipsoid and never overlap.
    """
    dims = tuple(int(n) for n in dims)
    spacing = np.asarray(spacing, dtype=np.float64)
    if min(dims) < 1 or np.any(spacing <= 0):
        raise ValueError(f"invalid dims/spacing {dims} {tuple(spacing)}")
    extent = np.asarray(dims) * spacing
    e_center = (np.asarray(dims) - 1) * spacing / 2.0
    semi = BODY_FRACTION * extent / 2.0

    while True:
        types = [t for t in LESION_TYPES if rng.random() < PRESENCE_P]
        placed = _place(rng, types, e_center, semi)
        if placed is not None:
            break
        log.info("lesion placement failed for %s after %d attempts; redrawing lesion set",
                 patient_id, MAX_PLACEMENT_ATTEMPTS)

    coords = [np.arange(n) * s for n, s in zip(dims, spacing)]
    X, Y, Z = np.meshgrid(*coords, indexing="ij")
    pts = np.stack([X, Y, Z], axis=-1)
    hu = np.full(dims, float(AIR_HU))
    hu[_inside_ellipsoid(pts, e_center, semi)] = BODY_HU
    lesions = []
    for t, d, c in placed:
        inside = ((pts - np.asarray(c)) ** 2).sum(axis=-1) <= (d / 2.0) ** 2
        hu[inside] = LESION_HU[t]
        lesions.append(Lesion(t, float(d), region_of(c, e_center), c))
    if noise_sigma > 0:
        hu = hu + rng.normal(0.0, noise_sigma, size=dims)
    vox = np.clip(np.floor(hu + 0.5), -32768, 32767).astype(np.int16)
    return Volume(vox, tuple(spacing)), PhantomFindings(patient_id, tuple(lesions))


# --------------------------------------------------------------------------
# text
# --------------------------------------------------------------------------


def _mm(d) -> str:
    return str(int(round(d)))


def render_report(f: PhantomFindings) -> str:
    if not f.lesions:
        return "no abnormality is detected ."
    return " ".join(f"a {l.type} of diameter {_mm(l.diameter_mm)} mm is present in the {l.region} region ."
                    for l in f.lesions)


def parse_report(text: str):
    """Inverse of :func:`render_report`: list of (type, diameter_mm, region).

    Sentences that do not follow the template are skipped.
    """
    out = []
    for sent in text.split(" ."):
        w = sent.split()
        # a {type} of diameter {d} mm is present in the {ap} {si} {lr} region
        if len(w) == 14 and w[0] == "a" and w[2:4] == ["of", "diameter"] and w[5] == "mm" and w[13] == "region":
            if w[1] in LESION_TYPES and w[4].isdigit():
                out.append((w[1], int(w[4]), " ".join(w[10:13])))
    return out


def diagnosis_question(lesion_type) -> str:
    return f"does this image show signs of {lesion_type} ?"


def diagnosis_answer(lesion_type, present) -> str:
    return f"yes , a {lesion_type} is present ." if present else f"no , there is no sign of {lesion_type} ."


def diagnosis_qa(f: PhantomFindings):
    return [(diagnosis_question(t), diagnosis_answer(t, f.present(t))) for t in LESION_TYPES]


def lesion_qa(f: PhantomFindings):
    out = []
    for l in f.lesions:
        out.append((f"what is the diameter of the {l.type} ?", f"the {l.type} measures {_mm(l.diameter_mm)} mm ."))
        out.append((f"where is the {l.type} located ?", f"the {l.type} is in the {l.region} region ."))
    return out


def gen_qa(f: PhantomFindings):
    """Three diagnosis pairs (one per lesion type) then size/location pairs per lesion."""
    return diagnosis_qa(f) + lesion_qa(f)


def build_samples(f: PhantomFindings, volume_path: str):
    pid = f.patient_id
    samples = [InstructionSample(f"{pid}-report", pid, volume_path, "report", "", render_report(f))]
    for t, (q, a) in zip(LESION_TYPES, diagnosis_qa(f)):
        samples.append(InstructionSample(f"{pid}-dx-{t}", pid, volume_path, "diagnosis", q, a,
                                         {"disease": t, "present": f.present(t)}))
    for i, (q, a) in enumerate(lesion_qa(f)):
        samples.append(InstructionSample(f"{pid}-vqa-{i}", pid, volume_path, "vqa", q, a))
    return samples


# --------------------------------------------------------------------------
# splits and jsonl
# --------------------------------------------------------------------------


def split_by_patient(samples, test_fraction=0.1, seed=0):
    patients = sorted({s.patient_id for s in samples})
    if len(patients) < 2:
        raise ValueError(f"split_by_patient needs at least 2 patients, got {len(patients)}")
    n_test = int(np.floor(test_fraction * len(patients) + 0.5))
    n_test = min(max(n_test, 1), len(patients) - 1)
    order = make_rng(seed, 404).permutation(len(patients))
    test_ids = {patients[i] for i in order[:n_test]}
    train = [s for s in samples if s.patient_id not in test_ids]
    test = [s for s in samples if s.patient_id in test_ids]
    return train, test


def sample_to_json(s: InstructionSample) -> str:
    return json.dumps({k: getattr(s, k) for k in SAMPLE_FIELDS}, ensure_ascii=False)


def write_jsonl(samples, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for s in samples:
            fh.write(sample_to_json(s) + "\n")


def _check_record(rec, lineno):
    if not isinstance(rec, dict):
        raise SchemaError(f"line {lineno}: expected a JSON object")
    for key in SAMPLE_FIELDS:
        if key not in rec:
            raise SchemaError(f"line {lineno}: missing required field {key!r}")
    extra = set(rec) - set(SAMPLE_FIELDS)
    if extra:
        raise SchemaError(f"line {lineno}: unexpected fields {sorted(extra)}")
    for key in SAMPLE_FIELDS[:-1]:
        if not isinstance(rec[key], str):
            raise SchemaError(f"line {lineno}: field {key!r} must be a string")
    if rec["task"] not in TASKS:
        raise SchemaError(f"line {lineno}: field 'task' must be one of {TASKS}, got {rec['task']!r}")
    label = rec["label"]
    if rec["task"] == "diagnosis":
        if not isinstance(label, dict) or "disease" not in label or "present" not in label:
            raise SchemaError(f"line {lineno}: field 'label' must hold disease/present for diagnosis samples")
    elif label is not None and not isinstance(label, dict):
        raise SchemaError(f"line {lineno}: field 'label' must be an object or null")


def read_jsonl(path):
    samples = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"line {lineno}: malformed JSON ({exc.msg})") from exc
            _check_record(rec, lineno)
            samples.append(InstructionSample(**rec))
    return samples


# --------------------------------------------------------------------------
# dataset directory
# --------------------------------------------------------------------------


def generate_dataset(out_dir, n, seed, dims=DEFAULT_DIMS, spacing=DEFAULT_SPACING, test_fraction=0.1):
    """Write ``volumes/*.rvol``, ``train.jsonl``, ``test.jsonl`` and ``manifest.json``.

    Volume i draws from its own sub-stream of ``seed`` so generation order
    does not matter.
    """
    if n < 1:
        raise ValueError(f"need n >= 1 volumes, got {n}")
    out = Path(out_dir)
    (out / "volumes").mkdir(parents=True, exist_ok=True)
    samples, findings = [], []
    for i in range(n):
        pid = f"p{i:05d}"
        vol, f = gen_phantom(make_rng(seed, 303, i), dims, spacing, patient_id=pid)
        rel = f"volumes/{pid}.rvol"
        write_rvol(vol, out / rel)
        findings.append(f)
        samples.extend(build_samples(f, rel))
    train, test = split_by_patient(samples, test_fraction, seed)
    write_jsonl(train, out / "train.jsonl")
    write_jsonl(test, out / "test.jsonl")
    manifest = {
        "seed": int(seed),
        "generator_version": GENERATOR_VERSION,
        "dims": list(dims),
        "spacing_mm": [float(s) for s in spacing],
        "counts": {
            "volumes": n,
            "train_patients": len({s.patient_id for s in train}),
            "test_patients": len({s.patient_id for s in test}),
            "train_samples": len(train),
            "test_samples": len(test),
            "lesions": {t: sum(f.present(t) for f in findings) for t in LESION_TYPES},
        },
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    return manifest
