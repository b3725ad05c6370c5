import hashlib
from contextlib import nullcontext

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tdistill import tensor as T
from tdistill.data import synth_dataset
from tdistill.distill import DistillConfig
from tdistill.errors import ConfigError, ContractError
from tdistill.models import CnnModel, ConvLstm, make_spec
from tdistill.optim import Adam, Sgd
from tdistill.schedule import (MemoryBank, NodeKind, all_general_schedule, build_schedule,
                               evaluate, general_step, memorize, review_step, run_training)
from tdistill.tensor import Tensor


def kinds_str(schedule):
    return "".join(k.value for k in schedule.kinds)


class TestBuildSchedule:
    def test_single_cycle_paper_hyperparameters(self):
        s = build_schedule(total_epochs=16, delta=5, k=3, warmup_epochs=0)
        assert s.memory_epochs() == [0, 5, 10]
        assert s.review_epochs() == [15]
        assert kinds_str(s) == "MGGGGMGGGGMGGGGR"

    def test_delta_one_packs_cycles(self):
        s = build_schedule(total_epochs=9, delta=1, k=3, warmup_epochs=0)
        assert s.memory_epochs() == [0, 1, 2, 4, 5, 6]
        assert s.review_epochs() == [3, 7]
        assert s.kinds[8] is NodeKind.GENERAL

    def test_full_run_240_epochs(self):
        s = build_schedule(total_epochs=240, delta=5, k=3, warmup_epochs=0)
        reviews = s.review_epochs()
        assert len(reviews) == 15
        assert reviews == list(range(15, 240, 16))

    def test_partition(self):
        s = build_schedule(total_epochs=50, delta=3, k=2, warmup_epochs=4)
        m, g, r = set(s.memory_epochs()), set(), set(s.review_epochs())
        g = {e for e, k in enumerate(s.kinds) if k is NodeKind.GENERAL}
        assert m | g | r == set(range(50))
        assert not (m & g or m & r or g & r)

    @given(total=st.integers(1, 120), delta=st.integers(1, 6), k=st.integers(1, 4),
           warmup=st.integers(0, 10))
    @settings(max_examples=60, deadline=None)
    def test_partition_and_review_spacing_property(self, total, delta, k, warmup):
        import warnings as _w
        with _w.catch_warnings():
            _w.simplefilter("ignore", UserWarning)  # short totals fall back to all-General
            s = build_schedule(total, delta, k, warmup)
        assert len(s.kinds) == total
        for t in s.review_epochs():
            # every review has its k memory nodes at exactly t-delta, ..., t-k*delta
            for j in range(1, k + 1):
                assert s.kinds[t - j * delta] is NodeKind.MEMORY
        for e in range(min(warmup, total)):
            assert s.kinds[e] is NodeKind.GENERAL

    def test_too_short_warns_all_general(self):
        with pytest.warns(UserWarning):
            s = build_schedule(total_epochs=5, delta=5, k=3)
        assert all(k is NodeKind.GENERAL for k in s.kinds)

    def test_invalid_parameters(self):
        with pytest.raises(ConfigError):
            build_schedule(10, 0, 3)
        with pytest.raises(ConfigError):
            build_schedule(10, 5, 0)


class TestMemoryBank:
    def _student(self, seed=0):
        return CnnModel(make_spec("thin3-small", input_shape=(1, 12, 12)), rng=np.random.default_rng(seed))

    def test_fifo_holds_exactly_k(self):
        s = build_schedule(16, 5, 3)
        bank = MemoryBank(3)
        student = self._student()
        for e in (0, 5, 10):
            memorize(bank, s, e, student)
        assert bank.epochs == [0, 5, 10]

    def test_cleared_bank_restarts_cycle(self):
        s = build_schedule(33, 5, 3)
        bank = MemoryBank(3)
        student = self._student()
        for e in (0, 5, 10):
            memorize(bank, s, e, student)
        bank.clear()
        memorize(bank, s, 16, student)
        assert bank.epochs == [16]

    def test_memorize_outside_memory_node_rejected(self):
        s = build_schedule(16, 5, 3)
        with pytest.raises(ContractError):
            memorize(MemoryBank(3), s, 1, self._student())

    def test_snapshot_survives_live_updates_bitwise(self):
        student = self._student()
        s = build_schedule(16, 5, 3)
        bank = MemoryBank(3)
        memorize(bank, s, 0, student)
        digest = hashlib.sha256(
            b"".join(bank.entries[0][1][n].data.tobytes() for n in sorted(bank.entries[0][1]))).hexdigest()
        data = synth_dataset(seed=1, n_per_class=8, num_classes=2, image_size=12)
        opt = Sgd(student.params, lr=0.05, momentum=0.9)
        for i in range(10):
            general_step(student, Tensor(data.images[i * 1:(i + 1) * 1 + 1]), data.labels[i:i + 2], opt, 0)
        after = hashlib.sha256(
            b"".join(bank.entries[0][1][n].data.tobytes() for n in sorted(bank.entries[0][1]))).hexdigest()
        assert digest == after


def _tiny_setup(seed=0, image_size=12, num_classes=3, n_per_class=6):
    rng_master = np.random.SeedSequence(seed)
    data_ss, student_ss, teacher_ss, lstm_ss = rng_master.spawn(4)
    data = synth_dataset(seed=seed + 100, n_per_class=n_per_class, num_classes=num_classes,
                         image_size=image_size)
    teacher = CnnModel(make_spec("wide3-small", num_classes=num_classes, input_shape=(1, image_size, image_size)),
                       rng=np.random.default_rng(teacher_ss), trainable=False)
    student = CnnModel(make_spec("thin3-small", num_classes=num_classes, input_shape=(1, image_size, image_size)),
                       rng=np.random.default_rng(student_ss))
    lstm = ConvLstm(hidden_channels=4, rng=np.random.default_rng(lstm_ss))
    return data, teacher, student, lstm


class TestSteps:
    def test_general_step_finite_positive_loss(self):
        data, _, student, _ = _tiny_setup()
        opt = Sgd(student.params, lr=0.05)
        out = general_step(student, Tensor(data.images[:4]), data.labels[:4], opt, 0)
        assert np.isfinite(out.loss_task) and out.loss_task > 0

    def test_general_step_leaves_lstm_untouched(self):
        data, _, student, lstm = _tiny_setup()
        before = {n: p.data.tobytes() for n, p in lstm.params.items()}
        opt = Sgd(student.params, lr=0.05)
        general_step(student, Tensor(data.images[:4]), data.labels[:4], opt, 0)
        assert all(lstm.params[n].data.tobytes() == before[n] for n in before)

    def _full_bank(self, student, cfg, data):
        """Bank of k snapshots from an evolving clone of ``student``."""
        s = build_schedule(cfg.k * cfg.delta + 1, cfg.delta, cfg.k)
        clone = CnnModel(student.spec, params={n: p.copy() for n, p in student.params.items()})
        opt = Sgd(clone.params, lr=0.05)
        bank = MemoryBank(cfg.k)
        for e in s.memory_epochs():
            general_step(clone, Tensor(data.images[:6]), data.labels[:6], opt, e)
            memorize(bank, s, e, clone)
        return bank

    def test_review_step_lambda_zero_matches_general_step_bitwise(self):
        cfg = DistillConfig(lam=0.0, k=3, delta=2)
        data, teacher, student_a, lstm = _tiny_setup(seed=3)
        student_b = CnnModel(student_a.spec, params={n: p.copy() for n, p in student_a.params.items()})
        bank = self._full_bank(student_b, cfg, data)

        x, y = Tensor(data.images[:6]), data.labels[:6]
        opt_a = Sgd(student_a.params, lr=0.05, momentum=0.9)
        opt_b = Sgd(student_b.params, lr=0.05, momentum=0.9)
        lstm_opt = Adam(lstm.params, lr=1e-3)
        lstm_before = {n: p.data.tobytes() for n, p in lstm.params.items()}

        general_step(student_a, x, y, opt_a, epoch=6)
        out = review_step(student_b, teacher, bank, lstm, x, y, cfg, opt_b, lstm_opt, epoch=6)

        for n in student_a.params:
            assert student_a.params[n].data.tobytes() == student_b.params[n].data.tobytes(), n
        # the Conv-LSTM still learned from the (detached) temporal loss
        assert out.loss_aux is not None and out.loss_aux >= 0
        assert any(lstm.params[n].data.tobytes() != lstm_before[n] for n in lstm_before)

    def test_review_step_lambda_one_updates_both(self):
        cfg = DistillConfig(lam=1.0, k=2, delta=2)
        data, teacher, student, lstm = _tiny_setup(seed=4)
        bank = self._full_bank(student, cfg, data)
        s_before = {n: p.data.tobytes() for n, p in student.params.items()}
        l_before = {n: p.data.tobytes() for n, p in lstm.params.items()}
        out = review_step(student, teacher, bank, lstm, Tensor(data.images[:6]), data.labels[:6],
                          cfg, Sgd(student.params, lr=0.05), Adam(lstm.params), epoch=4)
        assert out.loss_aux >= 0
        assert any(student.params[n].data.tobytes() != s_before[n] for n in s_before)
        assert any(lstm.params[n].data.tobytes() != l_before[n] for n in l_before)
        assert set(out.per_pair) == {"stage1->stage1", "stage2->stage2", "stage3->stage3"}

    def test_review_step_underfull_bank_rejected(self):
        cfg = DistillConfig(lam=1.0, k=3, delta=2)
        data, teacher, student, lstm = _tiny_setup(seed=5)
        with pytest.raises(ContractError):
            review_step(student, teacher, MemoryBank(3), lstm, Tensor(data.images[:2]),
                        data.labels[:2], cfg, Sgd(student.params, lr=0.05), Adam(lstm.params), epoch=6)

    def test_teacher_never_changes(self):
        cfg = DistillConfig(lam=1.0, k=2, delta=1)
        data, teacher, student, lstm = _tiny_setup(seed=6)
        t_before = {n: p.data.tobytes() for n, p in teacher.params.items()}
        bank = self._full_bank(student, cfg, data)
        review_step(student, teacher, bank, lstm, Tensor(data.images[:4]), data.labels[:4],
                    cfg, Sgd(student.params, lr=0.05), Adam(lstm.params), epoch=2)
        assert all(teacher.params[n].data.tobytes() == t_before[n] for n in t_before)


class TestReviewGradients:
    def test_full_review_loss_graph_finite_differences(self, f64):
        """d(L_task + lam*L_temporal)/d(student params) vs central differences,
        through the whole review graph (widths 2, 64-bit)."""
        from tdistill import distill as D
        from tdistill.gradcheck import grad_check

        rng = np.random.default_rng(12)
        spec = make_spec("thin3-small", num_classes=2, input_shape=(1, 8, 8),
                         stage_widths=(2, 2), blocks_per_stage=1)
        tspec = make_spec("wide3-small", num_classes=2, input_shape=(1, 8, 8),
                          stage_widths=(3, 3), blocks_per_stage=1)
        student = CnnModel(spec, rng=rng)
        teacher = CnnModel(tspec, rng=rng, trainable=False)
        lstm = ConvLstm(hidden_channels=2, rng=rng)
        snapshots = [CnnModel(spec, rng=np.random.default_rng(50 + i)).snapshot() for i in range(3)]
        x = Tensor(np.abs(rng.standard_normal((2, 1, 8, 8))))
        labels = np.array([0, 1])
        cfg = DistillConfig(lam=1.0, k=3, delta=2, layer_pairs=[("stage1", "stage1"), ("stage2", "stage2")])

        names = sorted(student.params)
        tensors = [student.params[n] for n in names]

        def f(*params):
            with T.no_grad():
                _, teacher_taps = teacher.forward(x)
                snap_taps = [CnnModel(spec, params=s).forward(x)[1] for s in snapshots]
            logits, live_taps = student.forward(x)
            task = T.softmax_cross_entropy(logits, labels)
            pair_losses = []
            for s_name, t_name in cfg.layer_pairs:
                live_map = D.attention_map(live_taps[s_name], normalize=True)
                snap_maps = [D.attention_map(st[s_name], normalize=True) for st in snap_taps]
                seq = D.build_knowledge_sequence(snap_maps + [live_map], [0, 2, 4, 6], mode="increments")
                n, hh, ww = seq.entries[0].shape
                pred = lstm.predict([T.reshape(e, (n, 1, hh, ww)) for e in seq.entries])
                target = D.absolute_increment(D.attention_map(teacher_taps[t_name], normalize=True),
                                              live_map)
                pair_losses.append(D.temporal_loss(pred, target))
            return D.student_loss(task, D.temporal_loss_pairs(pair_losses), cfg.lam)

        report = grad_check(f, tensors, h=1e-5, tol=1e-5)
        assert report.ok, report.failures[:5]


class TestRunTraining:
    def test_degenerate_schedule_equals_vanilla_bitwise(self):
        for variant in ("vanilla", "tskd"):
            data, teacher, student, lstm = _tiny_setup(seed=8)
            test = synth_dataset(seed=9, n_per_class=4, num_classes=3, image_size=12, split="test")
            if variant == "vanilla":
                schedule = all_general_schedule(3)
            else:
                with pytest.warns(UserWarning):  # too short for any review cycle
                    schedule = build_schedule(3, delta=5, k=3)
            opt = Sgd(student.params, lr=0.05, momentum=0.9)
            records = run_training(student, teacher, lstm, schedule, data, test,
                                   DistillConfig(k=3, delta=5), opt, Adam(lstm.params),
                                   variant, batch_size=8,
                                   data_rng=np.random.default_rng(77))
            if variant == "vanilla":
                vanilla_params = {n: p.data.tobytes() for n, p in student.params.items()}
                vanilla_losses = [r.loss_task for r in records]
            else:
                assert {n: p.data.tobytes() for n, p in student.params.items()} == vanilla_params
                assert [r.loss_task for r in records] == vanilla_losses

    def test_review_epochs_appear_in_metrics(self):
        data, teacher, student, lstm = _tiny_setup(seed=10)
        test = synth_dataset(seed=11, n_per_class=4, num_classes=3, image_size=12, split="test")
        cfg = DistillConfig(lam=1.0, k=2, delta=2)
        schedule = build_schedule(10, delta=2, k=2)
        records = run_training(student, teacher, lstm, schedule, data, test, cfg,
                               Sgd(student.params, lr=0.05), Adam(lstm.params),
                               "tskd", batch_size=9, data_rng=np.random.default_rng(3))
        review_records = [r for r in records if r.node_kind == "R"]
        assert [r.epoch for r in review_records] == [4, 9]
        assert all(r.loss_temporal is not None and r.loss_temporal >= 0 for r in review_records)
        assert all(r.loss_temporal is None for r in records if r.node_kind != "R")

    def test_lstm_only_changes_during_review_epochs(self):
        data, teacher, student, lstm = _tiny_setup(seed=12)
        test = synth_dataset(seed=13, n_per_class=3, num_classes=3, image_size=12, split="test")
        cfg = DistillConfig(lam=1.0, k=2, delta=1)
        schedule = build_schedule(4, delta=1, k=2)  # M M R G
        assert kinds_str(schedule) == "MMRG"

        changed_at = []

        def watch(record):
            changed_at.append((record.epoch, {n: p.data.tobytes() for n, p in lstm.params.items()}))

        run_training(student, teacher, lstm, schedule, data, test, cfg,
                     Sgd(student.params, lr=0.05), Adam(lstm.params), "tskd",
                     batch_size=9, data_rng=np.random.default_rng(4), on_epoch=watch)
        assert changed_at[0][1] == changed_at[1][1]      # epochs 0,1: frozen
        assert changed_at[1][1] != changed_at[2][1]      # epoch 2 is the review
        assert changed_at[2][1] == changed_at[3][1]      # epoch 3: frozen again

    def test_review_slower_than_general(self):
        data, teacher, student, lstm = _tiny_setup(seed=14, n_per_class=10)
        test = synth_dataset(seed=15, n_per_class=4, num_classes=3, image_size=12, split="test")
        cfg = DistillConfig(lam=1.0, k=2, delta=2)
        schedule = build_schedule(6, delta=2, k=2)  # M G M G R G
        records = run_training(student, teacher, lstm, schedule, data, test, cfg,
                               Sgd(student.params, lr=0.05), Adam(lstm.params), "tskd",
                               batch_size=10, data_rng=np.random.default_rng(5))
        mean = lambda kind: np.mean([r.ms_per_batch for r in records if r.node_kind == kind])
        assert mean("R") > mean("G")

    def test_resume_round_trip(self, tmp_path):
        from tdistill.schedule import load_run_state

        def make():
            data, teacher, student, lstm = _tiny_setup(seed=16)
            test = synth_dataset(seed=17, n_per_class=3, num_classes=3, image_size=12, split="test")
            return data, test, teacher, student, lstm

        cfg = DistillConfig(lam=1.0, k=2, delta=1)
        schedule = build_schedule(6, delta=1, k=2)  # M M R M M R

        # uninterrupted reference run
        data, test, teacher, student, lstm = make()
        opt, lopt = Sgd(student.params, lr=0.05, momentum=0.9), Adam(lstm.params)
        run_training(student, teacher, lstm, schedule, data, test, cfg, opt, lopt,
                     "tskd", 9, np.random.default_rng(6))
        full = {n: p.data.tobytes() for n, p in student.params.items()}

        # same run interrupted after epoch 2 (first 3 epochs share the kinds)
        data, test, teacher, student, lstm = make()
        opt, lopt = Sgd(student.params, lr=0.05, momentum=0.9), Adam(lstm.params)
        rng = np.random.default_rng(6)
        bank = MemoryBank(cfg.k)
        run_training(student, teacher, lstm, build_schedule(3, delta=1, k=2), data, test,
                     cfg, opt, lopt, "tskd", 9, rng, state_dir=tmp_path, bank=bank)

        # resume from disk into fresh objects and finish
        data, test, teacher, student, lstm = make()
        opt, lopt = Sgd(student.params, lr=0.05, momentum=0.9), Adam(lstm.params)
        rng = np.random.default_rng(0)  # wrong state on purpose; load restores it
        bank = MemoryBank(cfg.k)
        next_epoch = load_run_state(tmp_path, student, lstm, opt, lopt, bank, rng)
        assert next_epoch == 3
        run_training(student, teacher, lstm, schedule, data, test, cfg, opt, lopt,
                     "tskd", 9, rng, start_epoch=next_epoch, bank=bank)
        resumed = {n: p.data.tobytes() for n, p in student.params.items()}
        assert resumed == full

    def test_unknown_variant_rejected(self):
        data, teacher, student, lstm = _tiny_setup(seed=18)
        with pytest.raises(ConfigError):
            run_training(student, teacher, lstm, all_general_schedule(1), data, data,
                         DistillConfig(), Sgd(student.params, lr=0.1), None, "bogus", 4,
                         np.random.default_rng(0))


