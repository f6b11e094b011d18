from pathlib import Path

import pytest
from hypothesis import given, strategies as st

from objboot.config import (FULL_SCALE_KNN_K, FULL_SCALE, ConfigError, RunConfig, apply_overrides, load_config,
                            parse_kv_text, to_kv_text)


def test_defaults_validate():
    cfg = load_config()
    assert cfg == RunConfig()
    assert cfg.train.epochs == 30 and cfg.train.train_scenes == 256 and cfg.scene.num_classes == 4


def test_file_and_overrides(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("# toy run\ncluster.k = 4\nloss.enable_ci_object=off\neval.ratios=1,8\n")
    cfg = load_config(path, {"cluster.k": "6"})
    assert cfg.cluster.k == 6 and not cfg.loss.enable_ci_object and cfg.eval.ratios == (1, 8)


@pytest.mark.parametrize("items", [{"cluster.kk": "3"}, {"nope.k": "1"}, {"cluster": "1"}, {"cluster.k.x": "1"}])
def test_unknown_keys_rejected(items):
    with pytest.raises(ConfigError, match="unknown"):
        load_config(overrides=items)


@pytest.mark.parametrize("items", [{"cluster.k": "four"}, {"loss.centering": "maybe"},
                                   {"aug.crop_scale": "0.5"}, {"scene.patch_size": "7"},
                                   {"cluster.epsilon": "0"}, {"loss.enable_global": "false",
                                                              "loss.enable_cv_object": "false",
                                                              "loss.enable_ci_object": "false"},
                                   {"cluster.k": "100"}, {"eval.ratios": "0,8"}])
def test_bad_values_rejected(items):
    with pytest.raises(ConfigError):
        load_config(overrides=items)


def test_text_parse_errors():
    with pytest.raises(ConfigError, match="line 2"):
        parse_kv_text("a=1\nbroken\n")
    with pytest.raises(ConfigError, match="duplicate"):
        parse_kv_text("a=1\na=2\n")


def test_round_trip_text(tmp_path):
    cfg = load_config(overrides={"optim.lr": "0.00123", "aug.hue": "0.1", "cluster.method": "kmeans"})
    path = tmp_path / "c.cfg"
    path.write_text(to_kv_text(cfg))
    assert load_config(path) == cfg


@given(k=st.integers(1, 32), eps=st.floats(1e-4, 10, allow_nan=False), lr=st.floats(1e-6, 1.0),
       flags=st.tuples(st.booleans(), st.booleans(), st.booleans()).filter(any))
def test_round_trip_property(k, eps, lr, flags):
    items = {"cluster.k": str(k), "cluster.epsilon": repr(eps), "optim.lr": repr(lr),
             "loss.enable_global": str(flags[0]), "loss.enable_cv_object": str(flags[1]),
             "loss.enable_ci_object": str(flags[2])}
    cfg = load_config(overrides=items)
    assert load_config(overrides=parse_kv_text(to_kv_text(cfg))) == cfg


SOURCE_TEXT = Path(__file__).resolve().parents[1] / "paper.md"


@pytest.mark.skipif(not SOURCE_TEXT.exists(), reason="source text not available")
def test_recorded_full_scale_values_match_source_text():
    text = SOURCE_TEXT.read_text()
    coco = FULL_SCALE["coco"]
    assert (f"$\\lambda_{{\\text{{pos}}}}={coco['cluster.lambda_pos']}$, $S=25$k, and $K={coco['cluster.k']}$"
            in text)
    for name in ("imagenet", "coco"):
        preset = FULL_SCALE[name]
        triple = (f"$(\\lambda_{{\\text{{pos}}}}, S, K)=({preset['cluster.lambda_pos']}, "
                  f"{int(preset['bank.capacity']) // 1000}\\text{{k}}, {preset['cluster.k']})$")
        assert triple in text, triple
    assert f"$k={FULL_SCALE_KNN_K}$" in text
    ratios = RunConfig().eval.ratios
    assert "either " + ", ".join(map(str, ratios[:-1])) + f" or {ratios[-1]}" in text
    assert f"averaging over {RunConfig().eval.runs} independent runs" in text


def test_full_scale_presets_apply():
    cfg = apply_overrides(RunConfig(), FULL_SCALE["coco"])
    assert (cfg.cluster.lambda_pos, cfg.bank.capacity, cfg.cluster.k) == (2.0, 25_000, 64)
    # K=64 needs more tokens than the desk-scale views provide
    with pytest.raises(ConfigError):
        cfg.validate()
