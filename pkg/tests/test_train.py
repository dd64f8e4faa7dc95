import numpy as np
import pytest

from hiergeo import train as tr
from hiergeo.model import EncoderConfig, GeoDecoderModel, ModelConfig, uniform_loss


@pytest.fixture(scope="module")
def synth():
    data = tr.synthetic_dataset(n=32, kind="precomputed", tokens=4, token_dim=6, seed=1)
    stack = tr.synthetic_stack(data)
    return data, stack, stack.labels_for(data.lat, data.lon)


def _model(stack, seed=0):
    cfg = ModelConfig(stack.classes_per_hierarchy, S=2, D=8, heads=2, N=1, E=1, ffn_mult=2,
                      encoder=EncoderConfig(kind="precomputed", token_dim=6))
    return GeoDecoderModel(cfg, seed=seed)


def test_synthetic_stack_shape(synth):
    data, stack, labels = synth
    assert stack.classes_per_hierarchy == [2, 4]
    assert (labels >= 0).all()
    # the finest label identifies the generating cluster
    assert len({(c, f) for c, f in zip(data.cluster, labels[:, 1])}) == 4


def test_effective_batch():
    assert tr.effective_batch(512, 64) == 64
    assert tr.effective_batch(16, 64) == 16


def test_step_zero_loss_with_zero_heads(synth):
    data, stack, labels = synth
    model = _model(stack)
    losses = []
    tr.train(model, data.inputs, labels, data.scenes, tr.TrainSettings(epochs=1, batch_size=32),
             on_step=lambda s, v: losses.append(v))
    # geo terms are exactly uniform; the scene term is close to ln 2
    assert losses[0] == pytest.approx(uniform_loss(stack.classes_per_hierarchy, 2), abs=0.05)


def test_resume_is_bit_identical(synth, tmp_path):
    data, stack, labels = synth
    settings = tr.TrainSettings(epochs=3, batch_size=8, milestones=(2,), seed=4)

    full_losses = []
    full = _model(stack)

    def keep_first_epoch(state):
        if state.epoch == 1:
            tr.save_training_checkpoint(tmp_path / "e1.npz", full, state, {"partition_sha256": "x"})

    tr.train(full, data.inputs, labels, data.scenes, settings, on_step=lambda s, v: full_losses.append(v),
             on_epoch=keep_first_epoch)

    model, meta, buffers = tr.load_model(tmp_path / "e1.npz")
    tr.check_resume(meta, "x")
    state = tr.resume_state(meta, buffers)
    assert state.epoch == 1 and state.step == 4
    resumed_losses = []
    tr.train(model, data.inputs, labels, data.scenes, settings, state, on_step=lambda s, v: resumed_losses.append(v))
    assert resumed_losses == full_losses[4:]
    for (n, a), (_, b) in zip(full.named_parameters(), model.named_parameters()):
        assert a.data.tobytes() == b.data.tobytes(), n


def test_resume_rejects_other_partition():
    with pytest.raises(tr.ResumeError):
        tr.check_resume({"partition_sha256": "a"}, "b")


def test_max_steps_then_continue(synth):
    data, stack, labels = synth
    settings = tr.TrainSettings(epochs=2, batch_size=8, seed=2)
    a = _model(stack)
    tr.train(a, data.inputs, labels, data.scenes, settings)
    b = _model(stack)
    state = tr.train(b, data.inputs, labels, data.scenes, tr.TrainSettings(epochs=2, batch_size=8, seed=2, max_steps=3))
    assert state.step == 3
    tr.train(b, data.inputs, labels, data.scenes, settings, state)
    assert a.state_dict().keys() == b.state_dict().keys()
    for k, v in a.state_dict().items():
        assert v.tobytes() == b.state_dict()[k].tobytes()


def test_learning_rate_schedule(synth):
    data, stack, labels = synth
    lrs = []
    tr.train(_model(stack), data.inputs, labels, data.scenes,
             tr.TrainSettings(epochs=4, batch_size=32, lr=0.1, milestones=(1, 3), gamma=0.5),
             on_step=lambda s, v: lrs.append(s.optim.learning_rate))
    assert lrs == [0.1, 0.05, 0.05, 0.025]


def test_augment_keeps_shape_and_is_seeded():
    x = np.random.default_rng(0).normal(size=(3, 3, 16, 16))
    a = tr.augment_batch(x, np.random.default_rng(1))
    b = tr.augment_batch(x, np.random.default_rng(1))
    assert a.shape == x.shape and a.tobytes() == b.tobytes()


def test_labels_shape_checked(synth):
    data, stack, labels = synth
    with pytest.raises(ValueError):
        tr.train(_model(stack), data.inputs, labels[:, :1], data.scenes, tr.TrainSettings(epochs=1))
