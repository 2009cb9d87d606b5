import pytest

from dkspace import io
from dkspace.ensemble import BagPrediction
from dkspace.knowspace import classify
from dkspace.ensemble import SlideCode
from dkspace.synth import SynthConfig, generate_dataset

PREDS = [
    BagPrediction("a", 1, 0, (0.1, 0.9, 0.123456789012345)),
    BagPrediction("a", 2, 0, (1.0,)),
    BagPrediction("b", 3, 4, (0.0, 0.5)),
]


@pytest.mark.parametrize("suffix", [".csv", ".jsonl"])
def test_bag_probs_round_trip(tmp_path, suffix):
    path = tmp_path / f"bags{suffix}"
    io.write_bag_probs(path, PREDS)
    assert io.read_bag_probs(path) == PREDS


def test_csv_header(tmp_path):
    io.write_bag_probs(tmp_path / "b.csv", PREDS)
    assert (tmp_path / "b.csv").read_text().splitlines()[0] == "slide_id,scale,bag_id,p_1,p_2,p_3"


def test_bad_header(tmp_path):
    (tmp_path / "b.csv").write_text("id,p\nx,1\n")
    with pytest.raises(ValueError, match="header"):
        io.read_bag_probs(tmp_path / "b.csv")


def test_width_check(rcc):
    with pytest.raises(ValueError, match="6 features"):
        io.check_bag_widths([BagPrediction("a", 1, 0, (0.1,))], rcc)


def test_dataset_round_trip(tmp_path, rcc):
    cfg = SynthConfig(slides_per_subtype=3, flip_noise=0.1)
    slides = generate_dataset(rcc, cfg)
    io.write_dataset(tmp_path, slides, cfg, rcc)
    manifest = io.read_manifest(tmp_path / io.MANIFEST)
    assert [(e.slide_id, e.subtype, e.split, e.codes) for e in manifest] == [
        (s.slide_id, s.true_subtype, s.split, s.true_codes) for s in slides
    ]
    assert io.read_bag_probs(tmp_path / io.BAGS) == [p for s in slides for p in s.all_bag_probs()]
    bags = io.read_instance_bags(tmp_path, manifest)
    expected = [b for s in slides for sc in (1, 2, 3) for b in s.bags[sc]]
    assert len(bags) == len(expected)
    for got, want in zip(bags, expected):
        assert (got.slide_id, got.scale_index, got.bag_id) == (want.slide_id, want.scale_index, want.bag_id)
        assert (got.instances == want.instances).all() and (got.label == want.label).all()


def test_diagnoses_round_trip(tmp_path, sc):
    ds = [classify(SlideCode.from_bits(f"s{i}", format(i * 37 % 512, "09b"), "0010", "11000"), sc) for i in range(20)]
    io.write_diagnoses(tmp_path / "d.jsonl", ds)
    assert io.read_diagnoses(tmp_path / "d.jsonl") == sorted(ds, key=lambda d: d.slide_id)
