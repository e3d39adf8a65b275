import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from volvlm.phantom import (BODY_HU, DEFAULT_DIMS, DEFAULT_SPACING, DIAMETER_RANGE, LESION_HU, LESION_TYPES,
                            NOISE_SIGMA, InstructionSample, Lesion, PhantomFindings, SchemaError, build_samples,
                            diagnosis_qa, gen_phantom, gen_qa, generate_dataset, parse_report, read_jsonl,
                            region_of, render_report, spacing_for, split_by_patient, write_jsonl)
from volvlm.tensor import make_rng
from volvlm.volume import AIR_HU, read_rvol


def _expected_voxels(d, spacing):
    return (4.0 / 3.0) * np.pi * (d / 2.0) ** 3 / np.prod(spacing)


def test_default_geometry():
    assert DEFAULT_SPACING == (2.0, 2.0, 4.0)
    assert spacing_for((96, 96, 96)) == (1.0, 1.0, 1.0)


def test_zero_lesion_phantom_is_air_and_body():
    for seed in range(200):
        rng = make_rng(seed, 9)
        vol, f = gen_phantom(rng)
        if not f.lesions:
            break
    else:
        pytest.fail("no lesion-free phantom in 200 seeds")
    v = vol.voxels.astype(float)
    near_air = np.abs(v - AIR_HU) <= 6 * NOISE_SIGMA
    near_body = np.abs(v - BODY_HU) <= 6 * NOISE_SIGMA
    assert np.all(near_air | near_body)
    assert render_report(f) == "no abnormality is detected ."
    assert [a for _, a in gen_qa(f)] == [f"no , there is no sign of {t} ." for t in LESION_TYPES]


def test_lesions_respect_invariants():
    for seed in range(50):
        vol, f = gen_phantom(make_rng(seed, 2))
        assert vol.dims == DEFAULT_DIMS
        assert len(f.lesions) == len({l.type for l in f.lesions}) <= 3
        center = (np.asarray(DEFAULT_DIMS) - 1) * np.asarray(DEFAULT_SPACING) / 2
        for l in f.lesions:
            assert DIAMETER_RANGE[0] <= l.diameter_mm <= DIAMETER_RANGE[1]
            assert l.region == region_of(l.center_mm, center)


def test_calcification_center_value():
    seen = 0
    for seed in range(200):
        vol, f = gen_phantom(make_rng(seed, 3))
        for l in f.lesions:
            if l.type != "calcification" or l.diameter_mm < 6:
                continue
            idx = tuple(int(round(c / s)) for c, s in zip(l.center_mm, DEFAULT_SPACING))
            assert abs(int(vol.voxels[idx]) - LESION_HU["calcification"]) <= 3 * NOISE_SIGMA
            seen += 1
    assert seen >= 20


def test_voxel_count_oracle_isotropic():
    # 1 mm voxels: every lesion matches the sphere volume within 15%
    dims = (96, 96, 96)
    spacing = spacing_for(dims)
    n = 0
    for seed in range(50):
        vol, f = gen_phantom(make_rng(seed, 4), dims, spacing, noise_sigma=0.0)
        for l in f.lesions:
            count = int((vol.voxels == LESION_HU[l.type]).sum())
            assert abs(count / _expected_voxels(l.diameter_mm, spacing) - 1) <= 0.15, (seed, l)
            n += 1
    assert n > 30


def test_voxel_count_oracle_default_grid():
    # at (2, 2, 4) mm the smallest spheres cover a handful of voxels, so the
    # per-lesion bound is checked from 10 mm up and the mean over all lesions
    ratios, big = [], []
    for seed in range(50):
        vol, f = gen_phantom(make_rng(seed, 4), noise_sigma=0.0)
        for l in f.lesions:
            r = (vol.voxels == LESION_HU[l.type]).sum() / _expected_voxels(l.diameter_mm, DEFAULT_SPACING)
            ratios.append(r)
            if l.diameter_mm >= 10:
                big.append(r)
    assert abs(np.mean(ratios) - 1) <= 0.15
    assert np.all(np.abs(np.asarray(big) - 1) <= 0.15)


def test_label_balance():
    counts = dict.fromkeys(LESION_TYPES, 0)
    n = 500
    for i in range(n):
        _, f = gen_phantom(make_rng(11, 303, i))
        for t in LESION_TYPES:
            counts[t] += f.present(t)
    for t, c in counts.items():
        assert 0.35 <= c / n <= 0.65, (t, c)


def test_generation_deterministic():
    a, fa = gen_phantom(make_rng(5, 1))
    b, fb = gen_phantom(make_rng(5, 1))
    assert a == b and fa == fb


# ---------------------------------------------------------------- text

NODULE = Lesion("nodule", 10.0, "anterior upper left")


def test_report_templates():
    assert render_report(PhantomFindings("p")) == "no abnormality is detected ."
    one = PhantomFindings("p", (NODULE,))
    assert render_report(one) == "a nodule of diameter 10 mm is present in the anterior upper left region ."
    two = PhantomFindings("p", (NODULE, Lesion("cyst", 7.0, "posterior lower right")))
    assert render_report(two) == (render_report(one) + " a cyst of diameter 7 mm is present in the "
                                  "posterior lower right region .")


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.sampled_from(LESION_TYPES), st.integers(4, 20),
                          st.sampled_from(["anterior", "posterior"]), st.sampled_from(["upper", "lower"]),
                          st.sampled_from(["left", "right"])), max_size=3, unique_by=lambda t: t[0]))
def test_report_parse_inverts_render(items):
    lesions = tuple(Lesion(t, float(d), f"{a} {s} {lr}") for t, d, a, s, lr in items)
    f = PhantomFindings("p", lesions)
    assert parse_report(render_report(f)) == [(l.type, int(l.diameter_mm), l.region) for l in lesions]


def test_qa_templates():
    f = PhantomFindings("p", (Lesion("cyst", 12.0, "anterior lower left"),))
    dx = dict(diagnosis_qa(f))
    assert dx["does this image show signs of cyst ?"].startswith("yes")
    assert dx["does this image show signs of nodule ?"].startswith("no")
    assert dx["does this image show signs of calcification ?"].startswith("no")
    qa = dict(gen_qa(PhantomFindings("p", (Lesion("nodule", 12.0, "anterior lower left"),))))
    assert qa["what is the diameter of the nodule ?"] == "the nodule measures 12 mm ."
    assert len(gen_qa(PhantomFindings("p"))) == 3


def test_template_vocabulary_is_small():
    words = set()
    for seed in range(100):
        _, f = gen_phantom(make_rng(seed, 6), dims=(24, 24, 12), spacing=spacing_for((24, 24, 12)))
        for s in build_samples(f, "v.rvol"):
            words.update(s.question.split() + s.answer.split())
    assert len(words) < 80
    assert all(w == w.lower() for w in words)


# ---------------------------------------------------------------- splits and jsonl

def _samples(n_patients, per=2):
    return [InstructionSample(f"p{i}-{j}", f"p{i}", f"volumes/p{i}.rvol", "vqa", "q", "a")
            for i in range(n_patients) for j in range(per)]


def test_patient_split():
    samples = _samples(100)
    train, test = split_by_patient(samples, 0.1, seed=3)
    tr, te = {s.patient_id for s in train}, {s.patient_id for s in test}
    assert len(te) == 10 and not tr & te and len(tr | te) == 100
    assert split_by_patient(samples, 0.1, seed=3) == (train, test)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 60), st.floats(0.05, 0.5), st.integers(0, 100))
def test_patient_split_is_partition(n, frac, seed):
    train, test = split_by_patient(_samples(n, 1), frac, seed)
    tr, te = {s.patient_id for s in train}, {s.patient_id for s in test}
    assert tr and te and not tr & te and len(tr | te) == n


def test_jsonl_roundtrip_1k(tmp_path):
    rng = np.random.default_rng(0)
    samples = []
    for i in range(1000):
        task = ["report", "vqa", "diagnosis"][i % 3]
        label = {"disease": "cyst", "present": bool(rng.random() < 0.5)} if task == "diagnosis" else None
        samples.append(InstructionSample(f"s{i}", f"p{i // 7}", f"volumes/p{i // 7}.rvol", task,
                                         "" if task == "report" else "q ü", f"answer {i}", label))
    write_jsonl(samples, tmp_path / "a.jsonl")
    assert read_jsonl(tmp_path / "a.jsonl") == samples


def test_jsonl_errors(tmp_path):
    p = tmp_path / "a.jsonl"
    p.write_text("")
    assert read_jsonl(p) == []
    rec = {"id": "x", "patient_id": "p", "volume_path": "v", "task": "vqa", "question": "q", "answer": "a",
           "label": None}
    bad = dict(rec)
    del bad["answer"]
    p.write_text(json.dumps(rec) + "\n" + json.dumps(bad) + "\n")
    with pytest.raises(SchemaError, match=r"line 2: missing required field 'answer'"):
        read_jsonl(p)
    p.write_text(json.dumps({**rec, "task": "diagnosis"}) + "\n")
    with pytest.raises(SchemaError, match="label"):
        read_jsonl(p)


def test_dataset_layout(tmp_path):
    m = generate_dataset(tmp_path / "d", 12, seed=1)
    d = tmp_path / "d"
    assert len(list((d / "volumes").glob("*.rvol"))) == 12
    assert json.loads((d / "manifest.json").read_text())["seed"] == 1
    assert m["counts"]["train_patients"] + m["counts"]["test_patients"] == 12
    for s in read_jsonl(d / "train.jsonl") + read_jsonl(d / "test.jsonl"):
        assert read_rvol(d / s.volume_path).dims == DEFAULT_DIMS
        if s.task == "diagnosis":
            assert s.label["disease"] in LESION_TYPES
    generate_dataset(tmp_path / "e", 12, seed=1)
    assert (d / "manifest.json").read_bytes() == (tmp_path / "e" / "manifest.json").read_bytes()
    assert (d / "train.jsonl").read_bytes() == (tmp_path / "e" / "train.jsonl").read_bytes()
