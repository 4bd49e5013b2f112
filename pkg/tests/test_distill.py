import numpy as np
import pytest

from conftest import TINY, fixed_input
from ldprune import distill, modify
from ldprune.checkpoint import graph_hash
from ldprune.data import DatasetConfig, SyntheticLatents
from ldprune.diffusion import SchedulerConfig, add_noise, training_loss
from ldprune.distill import KDConfig, TrainState
from ldprune.graph import build_unet
from ldprune.tensor import GradTape, Tensor, no_tape


@pytest.fixture(scope="module")
def dataset():
    return SyntheticLatents(DatasetConfig(num_samples=64, num_conditions=TINY.num_conditions,
                                          channels=TINY.latent_shape[0], size=TINY.latent_size))


@pytest.fixture
def pair():
    teacher = build_unet(TINY, seed=0)
    student = distill.copy_graph(teacher)
    modify.commit(student, modify.plan_modification(student, "down.1.res.0"))  # needs a channel adapter
    modify.commit(student, modify.plan_modification(student, "mid.attn.0"))
    return teacher, student


def batch(seed=0):
    rng = np.random.default_rng(seed)
    clean = fixed_input(TINY, 2, seed)
    noise = Tensor(rng.standard_normal(clean.shape))
    return clean, [0, 1], np.array([10, 600]), noise


def fast(**kw):
    return KDConfig(**{"lr": 1e-3, "batch_size": 2, "iterations": 3, **kw})


class TestConfig:
    def test_presets(self):
        t2i = KDConfig.preset("t2i")
        assert (t2i.feat_coef, t2i.out_coef, t2i.lr, t2i.batch_size, t2i.grad_accum, t2i.iterations) == \
            (0.7, 0.7, 3e-5, 64, 4, 50_000)
        uig = KDConfig.preset("UIG")
        assert (uig.feat_coef, uig.out_coef, uig.lr, uig.batch_size, uig.grad_accum) == (300, 300, 5e-6, 32, 4)
        uag = KDConfig.preset("uag", iterations=5)
        assert (uag.feat_coef, uag.lr, uag.batch_size, uag.grad_accum, uag.iterations) == (10, 1e-4, 64, 2, 5)

    def test_invalid(self):
        with pytest.raises(ValueError):
            KDConfig(out_coef=-1)
        with pytest.raises(ValueError):
            KDConfig.preset("video")


class TestLoss:
    def test_identical_student_has_no_kd_terms(self):
        teacher = build_unet(TINY, seed=0)
        student = distill.copy_graph(teacher)
        terms = distill.kd_terms(teacher, student, *batch(), KDConfig())
        assert terms["out"].item() == 0.0 and terms["feat"].item() == 0.0
        assert terms["total"].item() == pytest.approx(terms["task"].item())

    def test_task_only_matches_training_loss(self, pair):
        teacher, student = pair
        clean, cond, t, noise = batch()
        got = distill.kd_loss(teacher, student, clean, cond, t, noise, KDConfig(out_coef=0, feat_coef=0)).item()
        rng = np.random.default_rng(5)
        ref_rng = np.random.default_rng(5)
        ts = ref_rng.integers(0, 1000, size=2)
        nz = ref_rng.standard_normal(clean.shape)
        expected = distill.kd_loss(None, student, clean, cond, ts, Tensor(nz), KDConfig()).item()
        assert training_loss(student, clean, cond, rng).item() == pytest.approx(expected, rel=1e-6)
        eps = student.forward(add_noise(clean, noise, t, SchedulerConfig()), t, cond).data
        assert got == pytest.approx(np.mean((eps - noise.data) ** 2), rel=1e-5)

    def test_weighted_sum_matches_numpy(self, pair):
        teacher, student = pair
        clean, cond, t, noise = batch(3)
        cfg = KDConfig(task_coef=1.0, out_coef=2.0, feat_coef=0.5)
        got = distill.kd_terms(teacher, student, clean, cond, t, noise, cfg)
        noisy = add_noise(clean, noise, t, SchedulerConfig())
        fs, ft = {}, {}
        with no_tape():
            es = student.forward(noisy, t, cond, features=fs).data
            et = teacher.forward(noisy, t, cond, features=ft).data
        task = np.mean((es - noise.data) ** 2)
        out = np.mean((es - et) ** 2)
        feat = 0.0
        for k in distill.default_taps(teacher):
            a, b = fs[k].data, ft[k].data
            if a.shape[1] != b.shape[1]:
                a = np.repeat(a.mean(axis=1, keepdims=True), b.shape[1], axis=1)
            feat += np.mean((a - b) ** 2)
        assert out > 0 and feat > 0
        assert got["task"].item() == pytest.approx(task, rel=1e-4)
        assert got["out"].item() == pytest.approx(out, rel=1e-4)
        assert got["feat"].item() == pytest.approx(feat, rel=1e-4)
        assert got["total"].item() == pytest.approx(task + 2 * out + 0.5 * feat, rel=1e-4)

    def test_gradients_reach_every_live_parameter(self, pair):
        teacher, student = pair
        params = student.live_parameters()
        assert any(":" in name for name, _ in params)  # adapter weights present
        for _, p in params:
            p.requires_grad = True
        with GradTape() as tape:
            loss = distill.kd_loss(teacher, student, *batch(1), KDConfig())
        grads = {id(k): g for k, g in tape.backward(loss).items()}
        missing = [n for n, p in params if id(p) not in grads or not np.any(grads[id(p)])]
        assert missing == []

    def test_teacher_gets_no_gradient(self, pair):
        teacher, student = pair
        for _, p in student.live_parameters():
            p.requires_grad = True
        with GradTape() as tape:
            loss = distill.kd_loss(teacher, student, *batch(1), KDConfig())
        grads = tape.backward(loss)
        teacher_ids = {id(p) for p in teacher.parameters()}
        assert not teacher_ids & {id(k) for k in grads}


class TestFinetune:
    def test_zero_iterations_is_noop(self, pair, dataset):
        teacher, student = pair
        h = graph_hash(student)
        _, state = distill.finetune(teacher, student, dataset, fast(iterations=0))
        assert graph_hash(student) == h and state.step == 0

    def test_teacher_frozen_and_student_moves(self, pair, dataset):
        teacher, student = pair
        th, sh = graph_hash(teacher), graph_hash(student)
        calls = teacher.forward_calls
        _, state = distill.finetune(teacher, student, dataset, fast())
        assert graph_hash(teacher) == th and graph_hash(student) != sh
        assert teacher.forward_calls == calls
        assert state.step == 3 and len(state.history) == 3

    def test_deterministic(self, pair, dataset):
        teacher, student = pair
        other = distill.copy_graph(student)
        distill.finetune(teacher, student, dataset, fast(grad_accum=2))
        distill.finetune(teacher, other, dataset, fast(grad_accum=2))
        assert graph_hash(student) == graph_hash(other)

    def test_resume_equals_uninterrupted(self, pair, dataset, tmp_path):
        teacher, student = pair
        other = distill.copy_graph(student)
        distill.finetune(teacher, student, dataset, fast(iterations=4))
        _, state = distill.finetune(teacher, other, dataset, fast(iterations=2))
        state.save(tmp_path / "s.npz")
        distill.finetune(teacher, other, dataset, fast(iterations=4), state=TrainState.load(tmp_path / "s.npz"))
        assert graph_hash(student) == graph_hash(other)

    def test_log_lines(self, pair, dataset, tmp_path):
        teacher, student = pair
        distill.finetune(teacher, student, dataset, fast(), log_path=tmp_path / "log.jsonl")
        lines = (tmp_path / "log.jsonl").read_text().splitlines()
        assert len(lines) == 3 and '"feat"' in lines[0]

    def test_same_graph_rejected(self, pair, dataset):
        with pytest.raises(ValueError):
            distill.finetune(pair[0], pair[0], dataset, fast())

    def test_nan_aborts_and_dumps_state(self, pair, dataset, tmp_path):
        teacher, student = pair
        student.live_parameters()[0][1].data[...] = np.nan
        with pytest.raises(distill.TrainingDiverged):
            distill.finetune(teacher, student, dataset, fast(), ckpt_dir=tmp_path)
        assert (tmp_path / "diverged_state.npz").exists()

    def test_improves_on_fixed_batch(self, pair, dataset):
        teacher, student = pair
        cfg = fast(iterations=15, lr=3e-3)
        probe = batch(7)
        before = distill.kd_loss(teacher, student, *probe, cfg).item()
        distill.finetune(teacher, student, dataset, cfg)
        assert distill.kd_loss(teacher, student, *probe, cfg).item() < before


class TestScratch:
    def test_same_structure_new_weights(self, pair):
        _, student = pair
        fresh = distill.reinitialized(student, seed=1)
        assert [n for n, _ in fresh.live_parameters()] == [n for n, _ in student.live_parameters()]
        assert fresh.param_count() == student.param_count()
        assert graph_hash(fresh) != graph_hash(student)

    def test_preserved_weights_start_closer(self, pair):
        teacher, student = pair
        fresh = distill.reinitialized(student, seed=1)
        cfg = KDConfig()
        probe = batch(2)
        assert distill.kd_loss(teacher, student, *probe, cfg).item() < distill.kd_loss(teacher, fresh, *probe, cfg).item()

    def test_train_teacher_reduces_loss(self, dataset):
        g = build_unet(TINY, seed=0)
        _, state = distill.train_teacher(g, dataset, distill.TeacherConfig(lr=3e-3, batch_size=8, iterations=30))
        first = np.mean([h["total"] for h in state.history[:5]])
        last = np.mean([h["total"] for h in state.history[-5:]])
        assert last < first
