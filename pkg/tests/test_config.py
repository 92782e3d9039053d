import json

import pytest

from pccmjo import config as C


def test_defaults_round_trip_through_json():
    cfg = C.RunConfig()
    assert C.from_dict(json.loads(C.dumps(cfg))) == cfg


def test_nested_values_and_lists_become_tuples():
    cfg = C.from_dict({"unet": {"channels": [2, 4, 4, 8]}, "synthetic": {"n_cases": 50}})
    assert cfg.unet.channels == (2, 4, 4, 8)
    assert cfg.synthetic.n_cases == 50
    assert C.from_dict(json.loads(C.dumps(cfg))) == cfg


@pytest.mark.parametrize("doc", [{"bogus": 1}, {"train": {"lr": 1e-3, "nope": 2}},
                                 {"train": 5}, [1, 2]])
def test_unknown_or_malformed_keys_are_rejected(doc):
    with pytest.raises(C.ConfigError):
        C.from_dict(doc)


def test_overrides_parse_json_and_strings():
    data = C.apply_overrides({"train": {"lr": 0.1}},
                             ["train.lr=0.002", "synthetic.n_cases=12", "workdir=out/x"])
    assert data == {"train": {"lr": 0.002}, "synthetic": {"n_cases": 12}, "workdir": "out/x"}
    with pytest.raises(C.ConfigError):
        C.apply_overrides({}, ["no_equals_sign"])
    with pytest.raises(C.ConfigError):
        C.apply_overrides({"workdir": "a"}, ["workdir.sub=1"])


def test_load_file_overrides_and_seed(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"train": {"stage2_epochs": 7}, "seed": 3}))
    cfg = C.load(p, ["train.batch_size=4"], seed=11)
    assert cfg.train.stage2_epochs == 7 and cfg.train.batch_size == 4
    assert cfg.seed == cfg.synthetic.rng_seed == cfg.train.seed == 11
    with pytest.raises(C.ConfigError):
        C.load(tmp_path / "missing.json")
    (tmp_path / "bad.json").write_text("{not json")
    with pytest.raises(C.ConfigError):
        C.load(tmp_path / "bad.json")


def test_workdir_resolution(monkeypatch):
    monkeypatch.delenv(C.OUTPUT_ROOT_ENV, raising=False)
    assert C.RunConfig().resolved_workdir() == "pccmjo_run"
    monkeypatch.setenv(C.OUTPUT_ROOT_ENV, "/tmp/elsewhere")
    assert C.RunConfig().resolved_workdir() == "/tmp/elsewhere"
    assert C.RunConfig(workdir="w").resolved_workdir() == "w"
