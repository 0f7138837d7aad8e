import numpy as np
import pytest

from metabin.autograd import Tensor, finite_diff_check
from metabin.errors import ConfigError, FormatError
from metabin.losses import cross_entropy_smoothed
from metabin.model import MetaBINNet, load_checkpoint, save_checkpoint
from metabin.normalization import EVAL, TRAIN


@pytest.fixture
def model():
    return MetaBINNet(num_classes=10, rng=np.random.default_rng(0))


@pytest.fixture
def images():
    return np.random.default_rng(1).normal(size=(6, 3, 16, 16))


def warm_up(model, images):
    # a few train forwards so running statistics are no longer at their init
    for k in range(3):
        model.embed(images + k, TRAIN)


def test_embedding_shape(model):
    x = np.random.default_rng(2).normal(size=(80, 3, 16, 16))
    assert model.embed(x, TRAIN).shape == (80, 32)


def test_logits_shape(model, images):
    emb, logits = model.forward(images, TRAIN)
    assert emb.shape == (6, 32) and logits.shape == (6, 10)


def test_plan_matches_bins(model):
    assert [p.channels for p in model.bins] == [8, 16, 32]
    assert [w.shape[0] for w in model.conv_weights] == [8, 16, 32]
    assert model.strides == (1, 2, 2)
    total = sum(p.data.size for p in model.parameters())
    assert 5_000 < total < 20_000


def test_identical_inputs_identical_rows(model, images):
    warm_up(model, images)
    x = np.concatenate([images[:1], images[:1], images[1:]])
    emb = model.extract(x)
    np.testing.assert_array_equal(emb[0], emb[1])


def test_eval_embeddings_are_batch_independent(model, images):
    warm_up(model, images)
    full = model.extract(images)
    single = np.concatenate([model.extract(images[i:i + 1]) for i in range(len(images))])
    assert np.max(np.abs(full - single)) < 1e-10


def test_eval_forward_leaves_running_stats(model, images):
    warm_up(model, images)
    before = {k: v.copy() for k, v in model.buffers().items()}
    model.extract(images)
    for k, v in model.buffers().items():
        np.testing.assert_array_equal(v, before[k])


def test_small_input_rejected(model):
    with pytest.raises(ConfigError):
        model.embed(np.zeros((2, 3, 7, 16)))


def test_channel_mismatch_rejected(model):
    with pytest.raises(ConfigError):
        model.embed(np.zeros((2, 1, 16, 16)))


def test_classifier_dimension_mismatch(model):
    with pytest.raises(ConfigError):
        model.classify(Tensor(np.zeros((2, 5))))


def test_zero_embedding_zero_classifier_gives_ln_m(model):
    model.classifier.data[:] = 0.0
    logits = model.classify(Tensor(np.zeros((4, 32))), TRAIN)
    loss = cross_entropy_smoothed(logits, [0, 1, 2, 3], 0.1).item()
    assert loss == pytest.approx(np.log(10), abs=1e-12)


def test_ce_gradient_wrt_classifier(images):
    model = MetaBINNet(num_classes=4, channels=(4, 4, 4), emb_dim=6, rng=np.random.default_rng(3))
    labels = np.array([0, 1, 2, 3, 0, 1])
    emb = model.embed(images, TRAIN).detach()

    def f(_):
        return cross_entropy_smoothed(model.classify(emb, EVAL), labels, 0.1)

    assert finite_diff_check(f, model.classifier).max_error < 1e-4


def test_partition_is_disjoint_and_exhaustive(model):
    part = model.partition()
    groups = [part.theta_f, part.theta_rho, part.phi]
    ids = [id(t) for g in groups for t in g.values()]
    assert len(ids) == len(set(ids))
    assert set(ids) == {id(p) for p in model.parameters()}
    assert list(part.theta_rho) == ["bin0.rho", "bin1.rho", "bin2.rho"]
    assert list(part.phi) == ["classifier.weight"]
    assert all(t.requires_grad for g in groups for t in g.values())


def test_partition_order_is_stable(model):
    assert list(model.partition().all()) == list(model.partition().all())


def test_base_loss_gradient_touches_every_group(model, images):
    emb, logits = model.forward(images, TRAIN)
    labels = np.array([0, 0, 1, 1, 2, 2])
    from metabin.losses import base_loss
    base_loss(logits, emb, labels)[0].backward()
    part = model.partition()
    for group in (part.theta_f, part.theta_rho, part.phi):
        assert any(np.any(t.grad != 0) for t in group.values() if t.grad is not None)


def test_checkpoint_round_trip(model, images, tmp_path):
    warm_up(model, images)
    for p in model.bins:
        p.rho.data[:] = np.random.default_rng(4).uniform(size=p.channels)
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, path)
    back = load_checkpoint(path)
    np.testing.assert_array_equal(back.extract(images), model.extract(images))
    assert list(back.state_dict()) == list(model.state_dict())
    for k, v in model.state_dict().items():
        np.testing.assert_array_equal(back.state_dict()[k], v)


def test_checkpoint_is_deterministic(model, tmp_path):
    save_checkpoint(model, tmp_path / "a.ckpt")
    save_checkpoint(load_checkpoint(tmp_path / "a.ckpt"), tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_checkpoint_header_layout(model, tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, path)
    blob = path.read_bytes()
    assert blob[:8] == b"METABIN\x00"
    assert int.from_bytes(blob[8:12], "little") == 1


@pytest.mark.parametrize("damage", ["magic", "version", "truncate"])
def test_checkpoint_corruption(model, tmp_path, damage):
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, path)
    blob = bytearray(path.read_bytes())
    if damage == "magic":
        blob[0:1] = b"X"
    elif damage == "version":
        blob[8:12] = (7).to_bytes(4, "little")
    else:
        blob = blob[:-5]
    path.write_bytes(bytes(blob))
    with pytest.raises(FormatError):
        load_checkpoint(path)


def test_fresh_model_rho_is_one(model):
    assert all(np.all(p.rho.data == 1.0) for p in model.bins)
