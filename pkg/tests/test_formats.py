import struct

import numpy as np
import pytest

from attack import AttackSpec, Norm, TargetRule, generate
from boundary import BoundaryModel
from data import Source, gen_dataset
from formats import (
    export_csv,
    read_adversarial,
    read_csv_dataset,
    read_dataset,
    read_json,
    read_params,
    to_json,
    write_adversarial,
    write_dataset,
    write_json,
    write_params,
)
from net import NetworkConfig, init_params
from train import StoppedBy
from utils import FormatError


@pytest.fixture
def adv(uniform_ds):
    model = BoundaryModel.from_vu(np.ones(32), np.zeros(32))
    spec = AttackSpec(norm=Norm.L0, epsilon=0.5, d_delta=4, target_rule=TargetRule.FLIP)
    return generate(uniform_ds, spec, model=model)


def test_dataset_file_round_trip(tmp_path, uniform_ds):
    path = write_dataset(uniform_ds, tmp_path / "u.afpd")
    assert read_dataset(path).same_as(uniform_ds)


def test_same_dataset_same_bytes(tmp_path):
    a = write_dataset(gen_dataset("uniform", 64, 8, seed=1), tmp_path / "a.afpd")
    b = write_dataset(gen_dataset("uniform", 64, 8, seed=1), tmp_path / "b.afpd")
    assert a.read_bytes() == b.read_bytes()


def test_header_layout(tmp_path, uniform_ds):
    payload = write_dataset(uniform_ds, tmp_path / "u.afpd").read_bytes()
    magic, version, kind, source, seed, n, d = struct.unpack_from("<4sIBBQQQ", payload)
    assert (magic, version, kind, source, seed, n, d) == (b"AFPD", 1, 0, 0, 7, 12, 32)
    assert len(payload) == struct.calcsize("<4sIBBQQQ") + 12 * 32 * 8 + 12 + 8


def test_adversarial_file(tmp_path, adv):
    path = write_adversarial(adv, tmp_path / "adv.afpd")
    record = read_adversarial(path)
    np.testing.assert_array_equal(record.X, adv.X)
    np.testing.assert_array_equal(record.targets, adv.targets)
    np.testing.assert_array_equal(record.base_labels, adv.base.y)
    assert record.provenance_id == adv.provenance_id
    assert [s.tolist() for s in record.supports] == [s.tolist() for s in adv.supports]
    training = read_dataset(path)
    np.testing.assert_array_equal(training.y, adv.targets)


def test_files_without_trailer_read_with_unit_scale(tmp_path, adv):
    header = struct.calcsize("<4sIBBQQQ")
    ds = gen_dataset("uniform", 32, 12, seed=7, scale=2.0)
    path = write_dataset(ds, tmp_path / "u.afpd")
    payload = path.read_bytes()
    X = np.frombuffer(payload, dtype="<f8", count=12 * 32, offset=header).reshape(12, 32)
    np.testing.assert_array_equal(X, ds.X)
    path.write_bytes(payload[:header + 12 * 32 * 8 + 12])
    loaded = read_dataset(path)
    np.testing.assert_array_equal(loaded.X, ds.X)
    assert loaded.scale == 1.0

    path = write_adversarial(adv, tmp_path / "adv.afpd")
    path.write_bytes(path.read_bytes()[:header + 12 * 32 * 8 + 12 + 12 + 8])
    record = read_adversarial(path)
    assert record.supports is None
    assert record.provenance_id == adv.provenance_id


def test_plain_file_is_not_adversarial(tmp_path, uniform_ds):
    path = write_dataset(uniform_ds, tmp_path / "u.afpd")
    with pytest.raises(FormatError):
        read_adversarial(path)


def test_tampered_contents_break_provenance(tmp_path, adv):
    path = write_adversarial(adv, tmp_path / "adv.afpd")
    payload = bytearray(path.read_bytes())
    payload[struct.calcsize("<4sIBBQQQ") + 3] ^= 0x01
    path.write_bytes(bytes(payload))
    with pytest.raises(FormatError, match="provenance"):
        read_adversarial(path)


@pytest.mark.parametrize("mutate, message", [
    (lambda b: b[:-3], "truncated"),
    (lambda b: b + b"\x00", "trailing"),
    (lambda b: b"XXXX" + b[4:], "magic"),
    (lambda b: b[:4] + struct.pack("<I", 9) + b[8:], "version"),
])
def test_corrupt_files(tmp_path, uniform_ds, mutate, message):
    path = write_dataset(uniform_ds, tmp_path / "u.afpd")
    path.write_bytes(mutate(path.read_bytes()))
    with pytest.raises(FormatError, match=message):
        read_dataset(path)


def test_missing_file_is_named(tmp_path):
    with pytest.raises(FormatError, match="nope.afpd"):
        read_dataset(tmp_path / "nope.afpd")


def test_params_file(tmp_path):
    cfg = NetworkConfig(d=16, m=5, m_plus=2, gamma=0.3)
    params = init_params(cfg, seed=3)
    loaded, loaded_cfg = read_params(write_params(params, cfg, tmp_path / "p.afpw"))
    np.testing.assert_array_equal(loaded.W, params.W)
    assert loaded_cfg == cfg


def test_csv_export(tmp_path, uniform_ds):
    path = export_csv(uniform_ds, tmp_path / "u.csv")
    header = path.read_text().splitlines()[0].split(",")
    assert header[0] == "x0" and header[-1] == "y"
    loaded = read_csv_dataset(path)
    np.testing.assert_array_equal(loaded.X, uniform_ds.X)
    assert loaded.source is Source.FILE


def test_json_encoder_handles_numpy_and_enums(tmp_path):
    doc = {"a": np.arange(3), "b": np.float64(0.5), "c": StoppedBy.CONVERGED, "d": tmp_path}
    path = write_json(doc, tmp_path / "doc.json")
    assert read_json(path) == {"a": [0, 1, 2], "b": 0.5, "c": "converged", "d": str(tmp_path)}
    assert to_json({"k": 1}) == '{\n  "k": 1\n}'


def test_bad_json(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text("{not json")
    with pytest.raises(FormatError):
        read_json(path)
