import hashlib
import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from plgf.context import ExternalFactors
from plgf.data import (
    FACTOR_DTYPE,
    convert_arrays,
    generate_synthetic,
    load_dataset,
    split_sizes,
    synthesize,
    write_dataset,
)
from plgf.errors import DatasetLoadError
from plgf.flow import GridRelation, aggregate

REL = GridRelation(4, (4, 4))


def digest(directory):
    h = hashlib.sha256()
    for p in sorted(directory.iterdir()):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()


@pytest.mark.parametrize("n,expected", [(3060, (2142, 306, 612)), (10, (7, 1, 2)), (1, (0, 0, 1)),
                                        (92, (64, 9, 19)), (0, (0, 0, 0))])
def test_split_sizes(n, expected):
    assert split_sizes(n) == expected


@given(st.integers(0, 100_000))
def test_split_sizes_partition(n):
    a, b, c = split_sizes(n)
    assert a + b + c == n and min(a, b, c) >= 0
    assert a == int(0.7 * n) or a == int(np.floor(0.7 * n))


def test_factor_record_layout():
    assert FACTOR_DTYPE.itemsize == 32
    offsets = {k: FACTOR_DTYPE.fields[k][1] for k in FACTOR_DTYPE.names}
    assert offsets == {"timestamp": 0, "weather_class": 8, "temperature_c": 12, "wind_mph": 16,
                       "day_of_week": 20, "hour_of_day": 24, "is_holiday": 28, "is_weekend": 29}


class TestSynthetic:
    def test_byte_identical_for_same_seed(self, tmp_path):
        a = generate_synthetic(tmp_path / "a", 7, 50, REL)
        b = generate_synthetic(tmp_path / "b", 7, 50, REL)
        assert digest(a) == digest(b)
        c = generate_synthetic(tmp_path / "c", 8, 50, REL)
        assert digest(a) != digest(c)

    def test_conservation_and_nonnegative(self):
        coarse, fine, _ = synthesize(3, 40, REL)
        assert (fine >= 0).all()
        agg = aggregate(fine.astype(np.float64), REL)
        assert np.max(np.abs(agg - coarse) / (coarse + 1)) < 1e-6

    @pytest.mark.parametrize("seed", range(5))
    def test_long_tail(self, seed):
        _, fine, _ = synthesize(seed, 30, GridRelation(4, (8, 8)))
        frac = [(f < 0.1 * f.max()).mean() for f in fine]
        assert min(frac) >= 0.6
        assert (fine == 0).any()

    def test_calendar_fields(self):
        _, _, rec = synthesize(0, 48 * 8, REL)
        assert np.all(np.diff(rec["timestamp"]) > 0)
        assert rec["hour_of_day"][0] == 0 and rec["hour_of_day"][2] == 1  # half-hour slots
        assert rec["day_of_week"][0] == 0  # the synthetic calendar starts on a Monday
        assert set(np.unique(rec["is_weekend"])) == {0, 1}
        assert rec["weather_class"].max() < 16


class TestRoundTrip:
    def test_bit_exact(self, tmp_path):
        coarse, fine, rec = synthesize(1, 30, REL)
        write_dataset(tmp_path, coarse, fine, rec)
        manifest, splits = load_dataset(tmp_path)
        assert manifest.counts == {"train": 21, "val": 3, "test": 6}
        assert manifest.relation == REL
        got_c = np.concatenate([splits[k].coarse for k in ("train", "val", "test")])
        got_f = np.concatenate([splits[k].fine for k in ("train", "val", "test")])
        got_r = np.concatenate([splits[k].records for k in ("train", "val", "test")])
        assert got_c.tobytes() == coarse.tobytes()
        assert got_f.tobytes() == fine.tobytes()
        for name in FACTOR_DTYPE.names:
            np.testing.assert_array_equal(got_r[name], rec[name])

    def test_all_split_divided_on_load(self, tmp_path):
        coarse, fine, rec = synthesize(1, 20, REL)
        write_dataset(tmp_path, coarse, fine, rec, presplit=False)
        m, splits = load_dataset(tmp_path)
        assert [len(splits[k]) for k in ("train", "val", "test")] == [14, 2, 4]
        assert splits["val"].name == "val"
        np.testing.assert_array_equal(splits["test"].fine, fine[16:])

    def test_samples_and_tensors(self, small_dataset):
        _, splits = load_dataset(small_dataset)
        s = splits["train"][0]
        assert s.coarse.values.shape == (8, 8) and s.fine.values.shape == (32, 32)
        assert isinstance(s.factors, ExternalFactors)
        c, f, cat, cont = splits["train"].tensors()
        assert c.shape == (len(splits["train"]), 1, 8, 8) and f.shape[-1] == 32
        assert cat.dtype == torch.int64 and cat.shape[1] == 3 and cont.shape[1] == 4
        assert torch.equal(cat[0], torch.tensor([s.factors.day_of_week, s.factors.hour_of_day,
                                                 s.factors.weather_class]))

    def test_full_size_archive(self, tmp_path):
        # 3060 samples of 2x2 -> 8x8 keep the file small while exercising the real split sizes
        rel = GridRelation(4, (2, 2))
        coarse, fine, rec = synthesize(0, 3060, rel)
        write_dataset(tmp_path, coarse, fine, rec)
        m, splits = load_dataset(tmp_path, rel)
        assert (m.counts["train"], m.counts["val"], m.counts["test"]) == (2142, 306, 612)
        assert splits["train"].timestamps.max() < splits["val"].timestamps.min()


class TestRejection:
    def test_empty_directory(self, tmp_path):
        with pytest.raises(DatasetLoadError, match="manifest"):
            load_dataset(tmp_path)

    def test_malformed_manifest(self, tmp_path):
        (tmp_path / "manifest.json").write_text(json.dumps({"format": "plgf-flow-dataset", "version": 1}))
        with pytest.raises(DatasetLoadError, match="malformed"):
            load_dataset(tmp_path)
        (tmp_path / "manifest.json").write_text("{not json")
        with pytest.raises(DatasetLoadError):
            load_dataset(tmp_path)

    def test_conservation_violation_lists_indices(self, tmp_path):
        coarse, fine, rec = synthesize(2, 20, REL)
        fine[3, 0, 0] += 50.0
        fine[9, 5, 5] += 50.0
        write_dataset(tmp_path, coarse, fine, rec, presplit=False)
        with pytest.raises(DatasetLoadError) as err:
            load_dataset(tmp_path)
        assert err.value.indices == [3, 9]

    def test_bad_geometry(self, tmp_path):
        coarse, fine, rec = synthesize(2, 10, REL)
        write_dataset(tmp_path, coarse, fine, rec)
        m = json.loads((tmp_path / "manifest.json").read_text())
        m["fine_shape"] = [15, 16]
        (tmp_path / "manifest.json").write_text(json.dumps(m))
        with pytest.raises(DatasetLoadError):
            load_dataset(tmp_path)

    def test_geometry_mismatch_with_request(self, tmp_path):
        coarse, fine, rec = synthesize(2, 10, REL)
        write_dataset(tmp_path, coarse, fine, rec)
        with pytest.raises(DatasetLoadError):
            load_dataset(tmp_path, GridRelation(2, (4, 4)))

    def test_truncated_file(self, tmp_path):
        coarse, fine, rec = synthesize(2, 10, REL)
        write_dataset(tmp_path, coarse, fine, rec)
        p = tmp_path / "train_fine.f32"
        p.write_bytes(p.read_bytes()[:-4])
        with pytest.raises(DatasetLoadError, match="truncated"):
            load_dataset(tmp_path)

    def test_out_of_range_category(self, tmp_path):
        coarse, fine, rec = synthesize(2, 10, REL)
        rec["weather_class"][4] = 16
        write_dataset(tmp_path, coarse, fine, rec, presplit=False)
        with pytest.raises(DatasetLoadError) as err:
            load_dataset(tmp_path)
        assert err.value.indices == [4]

    def test_time_order(self, tmp_path):
        coarse, fine, rec = synthesize(2, 10, REL)
        rec["timestamp"][5] = 0
        write_dataset(tmp_path, coarse, fine, rec, presplit=False)
        with pytest.raises(DatasetLoadError, match="temporal"):
            load_dataset(tmp_path)

    def test_wrong_split_ratio(self, tmp_path):
        coarse, fine, rec = synthesize(2, 10, REL)
        write_dataset(tmp_path, coarse, fine, rec)
        m = json.loads((tmp_path / "manifest.json").read_text())
        m["splits"]["val"], m["splits"]["test"] = m["splits"]["test"], m["splits"]["val"]
        (tmp_path / "manifest.json").write_text(json.dumps(m))
        with pytest.raises(DatasetLoadError):
            load_dataset(tmp_path)

    def test_negative_flows(self, tmp_path):
        coarse, fine, rec = synthesize(2, 10, REL)
        fine[1, 0, 1] += fine[1, 0, 0] + 1.0  # keep the block sum unchanged
        fine[1, 0, 0] = -1.0
        write_dataset(tmp_path, coarse, fine, rec, presplit=False)
        with pytest.raises(DatasetLoadError, match="negative"):
            load_dataset(tmp_path)


def test_converter_selects_channel(tmp_path):
    coarse, fine, rec = synthesize(4, 10, REL)
    two_c = np.stack([coarse, coarse * 2], axis=1)
    two_f = np.stack([fine, fine * 2], axis=1)
    factors = [ExternalFactors(weather_class=0, temperature_c=10.0, wind_mph=2.0, day_of_week=k % 7,
                               hour_of_day=k % 24, is_holiday=False, is_weekend=k % 7 >= 5) for k in range(10)]
    convert_arrays(tmp_path, two_c, two_f, factors, channel=1)
    m, splits = load_dataset(tmp_path)
    assert m.source == "taxibj" and m.raw["channel_selected"] == 1
    np.testing.assert_array_equal(splits["train"].fine, (fine * 2)[:7])


@settings(max_examples=15, deadline=None)
@given(n=st.sampled_from([1, 2, 4]), h=st.integers(1, 4), w=st.integers(1, 4), count=st.integers(1, 12),
       seed=st.integers(0, 1000))
def test_write_load_property(tmp_path_factory, n, h, w, count, seed):
    rel = GridRelation(n, (h, w))
    coarse, fine, rec = synthesize(seed, count, rel)
    d = tmp_path_factory.mktemp("ds")
    write_dataset(d, coarse, fine, rec, presplit=False)
    m, splits = load_dataset(d)
    assert sum(m.counts.values()) == count
    assert np.concatenate([splits[k].fine for k in ("train", "val", "test")]).tobytes() == fine.tobytes()
