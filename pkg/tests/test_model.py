import numpy as np
import pytest

from rfbnet.blocks import param_count
from rfbnet.detector import gen_priors, num_priors
from rfbnet.inference import as_records, detect, evaluate_model, ground_truth
from rfbnet.model import HEAD_KINDS, ModelConfig, RFBDetector, to_input
from rfbnet.tensor import Tensor
from rfbnet.train import msra_init


@pytest.mark.parametrize("first_priors", [4, 6])
def test_forward_shapes_match_priors(first_priors, rng):
    cfg = ModelConfig(widths=(8, 8, 16), bottleneck=4, first_priors=first_priors)
    model = msra_init(RFBDetector(cfg), 0)
    cls, loc = model(Tensor(to_input(rng.integers(0, 256, (2, 64, 64, 3), dtype=np.uint8))))
    p = num_priors(cfg.head_config())
    assert cls.shape == (2, p, 4) and loc.shape == (2, p, 4)
    assert len(gen_priors(cfg.head_config())) == p


def test_feature_sizes():
    model = RFBDetector(ModelConfig(widths=(8, 8, 16), bottleneck=4))
    f = model.features(Tensor(np.zeros((1, 3, 64, 64), dtype=np.float32)))
    assert [f[f"source{i}"].shape[2] for i in range(4)] == [16, 8, 4, 2]


def test_plain_head_param_matched():
    rfb = RFBDetector(ModelConfig()).num_parameters()
    plain = RFBDetector(ModelConfig(head="plain")).num_parameters()
    assert abs(plain - rfb) / rfb < 0.01


def test_pool_trailing_smaller_model():
    conv = RFBDetector(ModelConfig(trailing="conv")).num_parameters()
    for kind in ("maxpool", "avgpool"):
        assert RFBDetector(ModelConfig(trailing=kind)).num_parameters() < conv


def test_four_vs_six_priors_changes_head():
    six = RFBDetector(ModelConfig(first_priors=6)).num_parameters()
    four = RFBDetector(ModelConfig(first_priors=4)).num_parameters()
    assert four < six


def test_rfb_s_toggle():
    on = ModelConfig(rfb_s=True).block_specs()
    off = ModelConfig(rfb_s=False).block_specs()
    assert on["shallow"].name == "rfb_s" and "shallow" not in off


@pytest.mark.parametrize("head", HEAD_KINDS)
def test_every_head_builds(head):
    specs = ModelConfig(head=head).block_specs()
    assert {s.name for s in specs.values()} <= {head, "rfb", "rfb_s"}
    assert all(param_count(s) > 0 for s in specs.values())


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(head="deformable")
    with pytest.raises(ValueError):
        ModelConfig(image_size=50)
    with pytest.raises(ValueError):
        ModelConfig.from_dict({"depth": 3})


def test_to_input_normalization():
    x = to_input(np.full((1, 2, 2, 3), 255, dtype=np.uint8))
    assert x.shape == (1, 3, 2, 2) and np.all(x == 2.0)


def test_detect_and_evaluate_untrained(tmp_path, rng):
    from rfbnet.data import SceneSpec, generate, load_dataset
    generate(SceneSpec(seed=1), 4, tmp_path)
    ds = load_dataset(tmp_path)
    model = msra_init(RFBDetector(ModelConfig(widths=(8, 8, 16), bottleneck=4)), 0)
    per_image = detect(model, ds.images, top_k=10, batch_size=3)
    assert len(per_image) == 4 and all(len(d) <= 10 for d in per_image)
    recs = as_records(per_image, 64)
    assert all(0 <= r[3].min() and r[3].max() <= 64 for r in recs)
    res = evaluate_model(model, ds, top_k=10)
    assert 0.0 <= res.map <= 1.0
    assert set(ground_truth(ds)) == set(range(4))
