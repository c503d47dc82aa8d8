import hashlib
import json
import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from diffvqa.synthdata import (
    ANSWERS,
    CHANGES,
    COLS,
    KINDS,
    QUESTIONS,
    ROWS,
    SynthConfig,
    answer_of,
    generate_corpus,
    generate_pair,
    load_manifest,
    load_split,
    parse_answer,
    read_dataset,
    read_pgm,
    split_sizes,
    target_lesion,
    write_pgm,
)
from diffvqa.text import tokenize


def tree_hash(root: Path) -> str:
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


# -- templates ---------------------------------------------------------------------------


def test_template_example():
    q, a, k = answer_of("opacity", "left upper", "appeared", 0)
    assert a == "a new opacity has appeared in the left upper zone"
    assert k == "opacity" and q == "what has changed?"
    assert answer_of("nodule", "left upper", "unchanged", 2)[1:] == ("no change is observed", "change")
    assert answer_of("nodule", "left upper", "enlarged", 2)[0] == "how has the nodule changed?"


def test_keyword_in_answer_exhaustively():
    for kind in KINDS:
        for row in ROWS:
            for col in COLS:
                for change in CHANGES:
                    for qc in range(len(QUESTIONS)):
                        _, a, k = answer_of(kind, f"{col} {row}", change, qc)
                        assert k in tokenize(a)
                        parsed = parse_answer(a)
                        assert parsed["change"] == change
                        if change != "unchanged":
                            assert parsed["kind"] == kind and parsed["zone"] == f"{col} {row}"


def test_parse_answer_unknown_phrasing():
    assert parse_answer("something else entirely") == {"kind": None, "zone": None, "change": None}


# -- generate_pair ---------------------------------------------------------------------------


def test_determinism_bytewise():
    a, b = generate_pair(7, 3), generate_pair(7, 3)
    assert a.main.tobytes() == b.main.tobytes() and a.ref.tobytes() == b.ref.tobytes()
    assert (a.question, a.answer, a.keyword) == (b.question, b.answer, b.keyword)
    assert a.theta_star.tobytes() == b.theta_star.tobytes()
    assert not np.array_equal(generate_pair(7, 4).ref, a.ref)


def test_unchanged_main_equals_ref_before_warp():
    p = generate_pair(1, 0, change="unchanged")
    assert np.array_equal(p.main_clean, p.ref)
    assert not p.gt_mask.any()


def _support_oracle(les, size):
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    d2 = (yy - les.center[0]) ** 2 + (xx - les.center[1]) ** 2
    return np.exp(-d2 / (2 * les.radius ** 2)) > 0.05


def test_appeared_mask_is_new_lesion_support():
    for idx in range(10):
        p = generate_pair(2, idx, change="appeared")
        new = [les for les in p.main_lesions if les not in p.ref_lesions]
        assert len(new) == 1
        assert np.array_equal(p.gt_mask, _support_oracle(new[0], 64))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.integers(0, 10_000))
def test_pair_invariants(seed, index):
    p = generate_pair(seed, index)
    size = p.ref.shape[-1]
    assert p.main.shape == p.ref.shape == (1, size, size)
    assert 0.0 <= p.main.min() and p.main.max() <= 1.0
    assert p.keyword in tokenize(p.answer)
    assert p.gt_mask.any() == (p.change != "unchanged")
    cell = size / 3.0
    for les in p.ref_lesions + p.main_lesions:
        r, c = les.zone
        assert r * cell <= les.center[0] < (r + 1) * cell
        assert c * cell <= les.center[1] < (c + 1) * cell
        assert les.radius >= 2.0 and 0 < les.peak <= 1
        y0, y1, x0, x1 = les.bbox(size)
        assert y0 > 0 and x0 > 0 and y1 < size - 1 and x1 < size - 1
    A = p.theta_star[:, :2]
    s = math.sqrt(abs(np.linalg.det(A)))
    assert 0.95 - 1e-12 <= s <= 1.05 + 1e-12
    assert abs(math.degrees(math.atan2(A[1, 0], A[0, 0]))) <= 4.0 + 1e-9
    assert (np.abs(p.theta_star[:, 2]) * (size - 1) / 2 <= 4.0 + 1e-9).all()


def test_gt_mask_matches_pixel_difference():
    for idx in range(60):
        p = generate_pair(3, idx)
        if p.change == "unchanged":
            continue
        diff = np.abs(p.main_clean[0] - p.ref[0]) > 0.05
        iou = (diff & p.gt_mask).sum() / (diff | p.gt_mask).sum()
        assert iou >= 0.5, (idx, p.change, iou)


def test_target_lesion_box_contains_mask():
    for idx in range(20):
        p = generate_pair(4, idx)
        if p.change == "unchanged":
            continue
        y0, y1, x0, x1 = target_lesion(p).bbox(64)
        ys, xs = np.nonzero(p.gt_mask)
        assert y0 <= ys.min() and ys.max() <= y1 and x0 <= xs.min() and xs.max() <= x1


def test_small_image_rejected():
    with pytest.raises(ValueError):
        generate_pair(0, 0, SynthConfig(image_size=16))


# -- on disk ---------------------------------------------------------------------------------


def test_split_sizes_floor_rule():
    assert split_sizes(2500) == {"train": 2000, "valid": 250, "test": 250}
    assert split_sizes(19) == {"train": 17, "valid": 1, "test": 1}
    with pytest.raises(ValueError):
        split_sizes(10, (0.5, 0.5, 0.5))


def test_pgm_round_trip(tmp_path):
    img = np.random.default_rng(0).uniform(size=(5, 7))
    write_pgm(tmp_path / "a.pgm", img)
    raw = (tmp_path / "a.pgm").read_bytes()
    assert raw.startswith(b"P5\n7 5\n255\n") and len(raw) == 11 + 35
    back = read_pgm(tmp_path / "a.pgm")
    assert np.abs(back - img).max() <= 0.5 / 255 + 1e-12
    write_pgm(tmp_path / "b.pgm", back)
    assert (tmp_path / "b.pgm").read_bytes() == raw


def test_pgm_rejects_other_formats(tmp_path):
    (tmp_path / "x.pgm").write_bytes(b"P2\n1 1\n255\n0\n")
    with pytest.raises(ValueError):
        read_pgm(tmp_path / "x.pgm")


def test_corpus_round_trip_and_determinism(tmp_path):
    mans = generate_corpus(tmp_path / "a", 20, seed=5)
    generate_corpus(tmp_path / "b", 20, seed=5)
    assert tree_hash(tmp_path / "a") == tree_hash(tmp_path / "b")
    generate_corpus(tmp_path / "c", 20, seed=6)
    assert tree_hash(tmp_path / "a") != tree_hash(tmp_path / "c")
    assert {k: m.count for k, m in mans.items()} == {"train": 16, "valid": 2, "test": 2}

    for split, man in mans.items():
        lines = (tmp_path / "a" / f"{split}.jsonl").read_text().splitlines()
        assert len(lines) == man.count
        rec = json.loads(lines[0])
        assert set(rec) == {"id", "main_path", "ref_path", "question", "answer", "keyword",
                            "change", "theta_star", "mask_path"}
    assert load_manifest(tmp_path / "a", "valid") == mans["valid"]

    train = load_split(tmp_path / "a", "train")
    for i, s in enumerate(train):
        p = generate_pair(5, i)
        assert s.id == p.id and s.answer == p.answer and s.keyword == p.keyword
        assert np.abs(s.main - p.main).max() <= 0.5 / 255 + 1e-12
        assert np.abs(s.ref - p.ref).max() <= 0.5 / 255 + 1e-12
        assert np.array_equal(s.mask, p.gt_mask)
        assert np.abs(s.theta_star - p.theta_star).max() <= 1e-9
    # test split continues the index stream after train and valid
    assert load_split(tmp_path / "a", "test")[0].id == generate_pair(5, 18).id


def test_malformed_jsonl_is_reported(tmp_path):
    mans = generate_corpus(tmp_path, 10, seed=0)
    path = tmp_path / "valid.jsonl"
    path.write_text(path.read_text().replace('"answer"', '"answr"'))
    with pytest.raises(ValueError, match="malformed"):
        read_dataset(mans["valid"])
