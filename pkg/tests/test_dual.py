import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from mmgcd import objectives as O
from mmgcd.data import UNLABELED, Batch, UniformNoiseAugment, sample_batch
from mmgcd.dual import (DualBranchGCD, DualModel, PrototypeClassifier, branch_loss, classify,
                        forward_batch, text_branch_loss, total_loss, train_dual, visual_branch_loss)
from mmgcd.exceptions import InvalidStateError, TrainingDivergedError

TEMPS = O.TemperatureSet()


@pytest.fixture
def model(synth):
    torch.manual_seed(0)
    return DualModel(synth["enc"], 8, projection_dim=16, projector_hidden=16)


@pytest.fixture
def batch(synth):
    return sample_batch(synth["split"], synth["dataset"], 48, np.random.default_rng(3), UniformNoiseAugment(0.05))


@pytest.fixture(scope="module")
def fitted(synth, quick_tes):
    return DualBranchGCD(synth["enc"], quick_tes, n_classes=8, epochs=3, batch_size=64,
                         projection_dim=16, projector_hidden=16, seed=0).fit(synth["X"], synth["y_semi"])


def compose(h_a, h_b, p_a, p_b, labels, mask, lam, tau_t):
    # the four primitives, each averaged over both view orders, weighted by hand
    y = torch.as_tensor(labels)[torch.as_tensor(mask)]
    m = torch.as_tensor(mask)
    ucon = (O.self_contrastive(h_a, h_b, TEMPS.tau_c) + O.self_contrastive(h_b, h_a, TEMPS.tau_c)) / 2
    dist = (O.self_distill(p_a, p_b, tau_t, TEMPS.tau_s) + O.self_distill(p_b, p_a, tau_t, TEMPS.tau_s)) / 2
    scon = (O.supervised_contrastive(h_a[m], h_b[m], y, TEMPS.tau_c)
            + O.supervised_contrastive(h_b[m], h_a[m], y, TEMPS.tau_c)) / 2
    ce = (O.supervised_ce(p_a[m], y, TEMPS.tau_s) + O.supervised_ce(p_b[m], y, TEMPS.tau_s)) / 2
    return float((1 - lam) * (ucon + dist) + lam * (scon + ce))


class TestClassify:
    def test_feature_on_prototype(self):
        P = F.normalize(torch.randn(4, 6, dtype=torch.float64), dim=-1)
        logits = classify(3.0 * P[2:3], P)
        assert float(logits[0, 2]) == pytest.approx(1.0, abs=1e-12)
        assert int(logits.argmax()) == 2

    def test_orthogonal(self):
        P = torch.eye(4, dtype=torch.float64)[:2]
        f = torch.tensor([[0.0, 0.0, 1.0, 1.0]], dtype=torch.float64)
        assert torch.equal(classify(f, P), torch.zeros(1, 2, dtype=torch.float64))

    def test_brute_force(self):
        rng = np.random.default_rng(0)
        f, P = rng.standard_normal((5, 4)), rng.standard_normal((3, 4))
        got = classify(torch.as_tensor(f), torch.as_tensor(P)).numpy()
        for i in range(5):
            for j in range(3):
                ref = f[i] @ P[j] / (np.linalg.norm(f[i]) * np.linalg.norm(P[j]))
                assert got[i, j] == pytest.approx(ref, abs=1e-9)

    def test_no_prototypes(self):
        with pytest.raises(InvalidStateError):
            classify(torch.ones(1, 2), torch.zeros(0, 2))
        with pytest.raises(InvalidStateError):
            PrototypeClassifier(4, 0)

    def test_module_matches_function(self):
        clf = PrototypeClassifier(5, 3, generator=torch.Generator().manual_seed(0))
        x = torch.randn(4, 5)
        assert torch.allclose(clf(x), classify(x, clf.weight))
        np.testing.assert_allclose(clf.weight.norm(dim=-1).detach().numpy(), 1.0, atol=1e-6)


class TestBranchLosses:
    def test_compositional_oracle(self, model, batch, synth, quick_tes):
        w = O.LossWeights()
        with torch.no_grad():
            fwd = {k: v.double() for k, v in forward_batch(model, quick_tes, synth["enc"], batch).items()}
            for kind, fn in (("v", visual_branch_loss), ("t", text_branch_loss)):
                got = float(fn(fwd, batch, w, TEMPS, 0.05)["total"])
                ref = compose(fwd[f"h_{kind}_a"], fwd[f"h_{kind}_b"], fwd[f"p_{kind}_a"], fwd[f"p_{kind}_b"],
                              batch.labels, batch.labeled_mask, w.lambda_balance, 0.05)
                assert got == pytest.approx(ref, abs=1e-9)

    def test_lambda_one_all_labeled(self):
        rng = np.random.default_rng(0)
        h = F.normalize(torch.as_tensor(rng.standard_normal((6, 4))), dim=-1)
        p = torch.as_tensor(rng.standard_normal((6, 3)))
        y = np.array([0, 0, 1, 1, 2, 2])
        out = branch_loss(h, h.flip(0), p, p.flip(0), y, np.ones(6, bool), O.LossWeights(1.0), TEMPS, 0.04)
        assert float(out["total"]) == pytest.approx(float(out["scon"] + out["ce"]), abs=1e-12)

    def test_lambda_zero(self):
        rng = np.random.default_rng(1)
        h = F.normalize(torch.as_tensor(rng.standard_normal((6, 4))), dim=-1)
        p = torch.as_tensor(rng.standard_normal((6, 3)))
        y = np.array([0, 0, 1, -1, -1, -1])
        out = branch_loss(h, h.flip(0), p, p.flip(0), y, y >= 0, O.LossWeights(0.0), TEMPS, 0.04)
        assert float(out["total"]) == pytest.approx(float(out["ucon"] + out["distill"]), abs=1e-12)

    def test_zero_text_projection_degenerate(self, model, batch, synth, quick_tes):
        with torch.no_grad():
            model.text_projection.weight.zero_()
            fwd = forward_batch(model, quick_tes, synth["enc"], batch)
        z = fwd["z_tl_a"]
        assert torch.allclose(z, z[:1].expand_as(z))
        n, lam = len(batch), 0.35
        p = fwd["p_t_a"][0].double().tolist()
        soft = lambda tau: [math.exp(v / tau) / sum(math.exp(u / tau) for u in p) for v in p]
        q, s = soft(0.05), soft(TEMPS.tau_s)
        ucon = math.log(n)  # every similarity equals 1/tau_c
        dist = -sum(a * math.log(b) for a, b in zip(q, s))
        y = batch.labels[batch.labeled_mask]
        counts = {c: int((y == c).sum()) for c in set(y.tolist())}
        n_l, has = len(y), [c for c in y.tolist() if counts[c] > 1]
        scon = math.log(n_l - 1) if has else 0.0
        ce = float(np.mean([-math.log(s[c]) for c in y.tolist()]))
        ref = (1 - lam) * (ucon + dist) + lam * (scon + ce)
        got = float(text_branch_loss(fwd, batch, O.LossWeights(), TEMPS, 0.05)["total"])
        assert got == pytest.approx(ref, abs=1e-4)  # float32 forward

    def test_no_gradient_to_tes(self, model, batch, synth, quick_tes):
        quick_tes.layer_.zero_grad(set_to_none=True)
        fwd = forward_batch(model, quick_tes, synth["enc"], batch)
        text_branch_loss(fwd, batch, O.LossWeights(), TEMPS, 0.05)["total"].backward()
        assert quick_tes.layer_.weight.grad is None and quick_tes.layer_.bias.grad is None
        assert model.text_projection.weight.grad is not None

    def test_missing_tes(self, model, batch, synth):
        with pytest.raises(InvalidStateError):
            forward_batch(model, None, synth["enc"], batch)


class TestTotalLoss:
    def test_decomposition(self, model, batch, synth, quick_tes):
        fwd = forward_batch(model, quick_tes, synth["enc"], batch)
        total, comp = total_loss(fwd, batch, O.LossWeights(), TEMPS, 0.05)
        total, comp = total.detach(), {k: v.detach() for k, v in comp.items()}
        parts = comp["visual"] + comp["text"] + comp["entropy_term"] + comp["cico_term"]
        assert abs(float(total) - float(parts)) <= 1e-12 * max(1.0, abs(float(total)))
        assert float(comp["entropy_term"]) == pytest.approx(-float(comp["h_mm"]))

    def test_weights_zeroed(self, model, batch, synth, quick_tes):
        fwd = forward_batch(model, quick_tes, synth["enc"], batch)
        total, comp = total_loss(fwd, batch, O.LossWeights(epsilon=0.0, lambda_cico=0.0), TEMPS, 0.05)
        assert float(total.detach()) == float((comp["visual"] + comp["text"]).detach())

    def test_unlabeled_only(self, model, synth, quick_tes):
        X = synth["X"][synth["y_semi"] == UNLABELED][:16]
        b = Batch(list(range(16)), X, X + 0.01, np.full(16, UNLABELED), np.zeros(16, bool))
        fwd = forward_batch(model, quick_tes, synth["enc"], b)
        _, comp = total_loss(fwd, b, O.LossWeights(), TEMPS, 0.05)
        for key in ("cico", "visual_scon", "visual_ce", "text_scon", "text_ce"):
            assert float(comp[key].detach()) == 0.0


class TestEstimator:
    def test_parameter_groups(self, model, synth):
        groups = model.parameter_groups()
        assert set(groups) == {"visual_tail", "projectors", "classifier", "text_projection"}
        flat = [id(p) for g in groups.values() for p in g]
        assert len(flat) == len(set(flat))
        assert set(flat) == {id(p) for p in model.parameters() if p.requires_grad}
        encoder_ids = {id(p) for m in synth["enc"].frozen_modules().values() for p in m.parameters()}
        assert not encoder_ids & set(flat)

    def test_shared_projector(self, synth):
        m = DualModel(synth["enc"], 8, 16, 16, share_projector=True)
        assert m.projector_t is m.projector_v

    def test_fit_outputs(self, fitted, synth):
        assert len(fitted.history_) == 3
        rec = fitted.history_[-1]
        assert {"visual", "text", "h_mm", "cico", "lr", "tau_t", "probe_cico"} <= set(rec)
        np.testing.assert_allclose(fitted.model_.classifier.weight.norm(dim=-1).detach().numpy(), 1.0, atol=1e-6)
        pred = fitted.predict(synth["X"])
        assert pred.shape == (160,) and set(pred) <= set(range(8))
        proba = fitted.predict_proba(synth["X"])
        np.testing.assert_allclose(proba.sum(1), 1.0, atol=1e-5)

    def test_encoders_untouched(self, synth, quick_tes):
        before = synth["enc"].state_snapshot()
        DualBranchGCD(synth["enc"], quick_tes, n_classes=8, epochs=1, batch_size=64,
                      projection_dim=16, projector_hidden=16).fit(synth["X"], synth["y_semi"])
        after = synth["enc"].state_snapshot()
        assert all(torch.equal(before[k], after[k]) for k in before)

    def test_inference_without_text_branch(self, fitted, synth):
        import copy
        est = copy.deepcopy(fitted)
        ref = est.predict(synth["X"])
        est.tes = None
        est.model_.text_projection = None
        est.model_.projector_t = None
        np.testing.assert_array_equal(est.predict(synth["X"]), ref)

    def test_singleton_and_repeat(self, fitted, synth):
        full = fitted.predict(synth["X"])
        single = np.array([fitted.predict(synth["X"][i:i + 1])[0] for i in range(0, 160, 9)])
        np.testing.assert_array_equal(single, full[::9])
        np.testing.assert_array_equal(fitted.predict(synth["X"]), full)

    def test_temperature_argmax_invariance(self, fitted, synth):
        ref = fitted.predict(synth["X"])
        for tau in (0.01, 1.0):
            np.testing.assert_array_equal(fitted.set_params(tau_s=tau).predict_proba(synth["X"]).argmax(1), ref)
        fitted.set_params(tau_s=0.1)

    def test_prototype_on_feature_predicts_it(self, fitted, synth):
        f = fitted.features(synth["X"][:1])
        with torch.no_grad():
            logits = fitted.model_.classify(f)
        j = int(logits.argmax())
        assert fitted.predict(synth["X"][:1])[0] == j

    def test_seed_determinism(self, synth, quick_tes):
        kw = dict(n_classes=8, epochs=2, batch_size=64, projection_dim=16, projector_hidden=16, seed=3)
        a = DualBranchGCD(synth["enc"], quick_tes, **kw).fit(synth["X"], synth["y_semi"])
        b = DualBranchGCD(synth["enc"], quick_tes, **kw).fit(synth["X"], synth["y_semi"])
        np.testing.assert_allclose(a.decision_function(synth["X"]), b.decision_function(synth["X"]), atol=1e-9)
        assert a.history_ == b.history_

    def test_divergence(self, synth, quick_tes):
        est = DualBranchGCD(synth["enc"], quick_tes, n_classes=8, epochs=3, batch_size=64,
                            learning_rate=1e38, projection_dim=16, projector_hidden=16)
        with pytest.raises(TrainingDivergedError) as info:
            est.fit(synth["X"], synth["y_semi"])
        assert "components" in info.value.snapshot

    def test_fit_errors(self, synth, quick_tes):
        X, y = synth["X"], synth["y_semi"]
        with pytest.raises(InvalidStateError):
            DualBranchGCD(synth["enc"], None, n_classes=8).fit(X, y)
        with pytest.raises(ValueError):
            DualBranchGCD(synth["enc"], quick_tes).fit(X, y)
        with pytest.raises(ValueError):
            DualBranchGCD(synth["enc"], quick_tes, n_classes=2).fit(X, y)
        with pytest.raises(ValueError):
            DualBranchGCD(synth["enc"], quick_tes, n_classes=8, prototype_init="nope", epochs=1).fit(X, y)

    def test_random_init_changes_prototypes(self, synth, quick_tes):
        kw = dict(n_classes=8, epochs=0, projection_dim=16, projector_hidden=16)
        a = DualBranchGCD(synth["enc"], quick_tes, prototype_init="random", **kw).fit(synth["X"], synth["y_semi"])
        b = DualBranchGCD(synth["enc"], quick_tes, **kw).fit(synth["X"], synth["y_semi"])
        assert not torch.allclose(a.model_.classifier.weight, b.model_.classifier.weight)
        # ss-kmeans seeding puts labeled class c on prototype c from the start
        lab = synth["y_semi"] != UNLABELED
        assert (b.predict(synth["X"][lab]) == synth["y_semi"][lab]).mean() > 0.9

    def test_save_load(self, fitted, synth, quick_tes, tmp_path):
        path = tmp_path / "dual.npz"
        fitted.save(path)
        back = DualBranchGCD.load(path, synth["enc"], quick_tes)
        np.testing.assert_array_equal(back.predict(synth["X"]), fitted.predict(synth["X"]))
        assert back.get_params()["n_classes"] == 8 and back.n_epochs_trained_ == 3
        data = np.load(path)
        assert all(data[k].dtype == np.float32 for k in data.files if k.startswith("param/"))
        with pytest.raises(InvalidStateError):
            DualBranchGCD.load(tmp_path / "nope.npz", synth["enc"])

    def test_train_dual_wrapper(self, synth, quick_tes):
        est = train_dual(synth["dataset"], synth["split"], quick_tes, synth["enc"], epochs=1,
                         batch_size=64, projection_dim=16, projector_hidden=16)
        assert est.n_classes == 8
