import numpy as np
import pytest

from hawqkit.config import RunConfig, dump_config, load_config, make_datasets, parse_config
from hawqkit.data import synth_images, to_csv
from hawqkit.errors import ConfigError


def test_defaults():
    cfg = load_config(None)
    assert cfg.model.widths == [20] * 5 and cfg.finetune.lr == 0.002
    assert cfg.train.lr == 0.05 and cfg.probe.max_iters == 20
    assert cfg.budget().ratio == 13.0
    assert cfg.optimizer("finetune", seed=3).seed == 3


def test_partial_overlay_keeps_other_defaults():
    cfg = parse_config("finetune: {lr: 0.01}\nplan: {max_bits: 1000}\n")
    assert cfg.finetune.lr == 0.01 and cfg.finetune.max_epochs == 5
    assert cfg.train.lr == 0.05
    assert cfg.budget().max_bits == 1000


def test_unknown_keys_name_their_path():
    with pytest.raises(ConfigError, match="train: unknown key"):
        parse_config("train: {learning_rate: 1}")
    with pytest.raises(ConfigError, match="unknown key"):
        parse_config("colour: red")
    with pytest.raises(ConfigError, match="expected a mapping"):
        parse_config("model: 3")


def test_invalid_values():
    for text in ("data: {kind: imagenet}", "data: {kind: idx}", "seeds: []",
                 "train: {lr: -1}", "probe: {rel_tol: 2}", "model: {kind: vgg}",
                 "plan: {budget_ratio: 0}", "landscape: {points: 0}", "a: [", ):
        with pytest.raises(ConfigError):
            parse_config(text)
    with pytest.raises(ConfigError):
        load_config("/nonexistent.yaml")


def test_dump_round_trip():
    cfg = parse_config("seed: 4\nmodel: {widths: [4, 4, 6], strides: [1, 2]}")
    assert parse_config(dump_config(cfg)) == cfg


def test_synthetic_datasets_split():
    cfg = parse_config("data: {n: 50, eval_n: 20}\nmodel: {widths: [4, 4, 4], strides: [1, 1]}")
    tr, ev = make_datasets(cfg, seed=1)
    assert len(tr) == 50 and len(ev) == 20 and tr.features.shape[1:] == (1, 8, 8)
    tr2, _ = make_datasets(cfg, seed=1)
    assert np.array_equal(tr.features, tr2.features)


def test_csv_dataset_tail_split(tmp_path):
    ds = synth_images(30, 10, (1, 8, 8), seed=0)
    path = tmp_path / "d.csv"
    to_csv(ds, path)
    cfg = parse_config(f"data: {{kind: csv, path: '{path}', eval_fraction: 0.2}}")
    tr, ev = make_datasets(cfg)
    assert len(tr) == 24 and len(ev) == 6
    assert np.allclose(ev.features, ds.features[24:])
    cfg = parse_config(f"data: {{kind: csv, path: '{path}', eval_fraction: 0.0}}")
    with pytest.raises(ConfigError):
        make_datasets(cfg)
