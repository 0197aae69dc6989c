"""The eleven acceptance criteria, each reported as one PASS/FAIL line in the
terminal summary. Criteria 8-11 share two end-to-end runs of
``configs/small_mnist.cfg`` (the second one only for the determinism check)."""
import dataclasses
import time
from pathlib import Path

import numpy as np
import pytest

from saakrobust import attacks as A
from saakrobust import defenses as D
from saakrobust import harness as H
from saakrobust import models as M
from saakrobust import saak as S
from saakrobust import selection as F
from saakrobust.config import ExperimentConfig

from conftest import MNIST_DIR, requires_mnist
from gradcheck import numeric_grad, rel_error
from naive_entropy import naive_entropy

pytestmark = pytest.mark.slow

CONFIG = Path(__file__).resolve().parents[1] / "configs" / "small_mnist.cfg"
LOSSLESS_2 = (S.StageConfig(2, 1.0, None), S.StageConfig(2, 1.0, None))


@pytest.fixture(scope="module")
def lossless_pipeline(mnist_test):
    images = mnist_test.images[:100]
    return images, S.fit_pipeline(images, LOSSLESS_2)


@pytest.fixture(scope="module")
def runs(tmp_path_factory):
    if not (MNIST_DIR / "t10k-images-idx3-ubyte").is_file():
        pytest.skip("MNIST not available")
    cfg = ExperimentConfig.load(CONFIG)
    cfg = dataclasses.replace(cfg, data=dataclasses.replace(cfg.data, dir=str(MNIST_DIR)))
    out = []
    for i in range(2):
        path = tmp_path_factory.mktemp(f"acceptance-run{i}")
        start = time.perf_counter()
        report = H.run_experiment(cfg, path)
        out.append((path, report, time.perf_counter() - start))
    return cfg, out


@requires_mnist
def test_1_lossless_roundtrip(acceptance, mnist_test):
    with acceptance(1, "lossless 2-stage Saak roundtrip on 100 MNIST images") as d:
        start = time.perf_counter()
        images = mnist_test.images[:100]
        pipe = S.fit_pipeline(images, LOSSLESS_2)
        err64 = np.abs(pipe.inverse(pipe.forward(images)) - images).max()
        x32 = images.astype(np.float32)
        err32 = np.abs(pipe.inverse(pipe.forward(x32)) - x32).max()
        elapsed = time.perf_counter() - start
        d.update(err64=f"{err64:.1e}", err32=f"{err32:.1e}", seconds=f"{elapsed:.2f}")
        assert err64 <= 1e-10 and err32 <= 1e-5 and elapsed < 30


@requires_mnist
def test_2_orthonormality_and_energy(acceptance, lossless_pipeline, mnist_train_small):
    with acceptance(2, "kernel orthonormality and per-cuboid energy conservation") as d:
        _, pipe = lossless_pipeline
        default = S.fit_pipeline(mnist_train_small, S.MNIST_STAGES)
        gram = max(st.gram_error() for p in (pipe, default) for st in p.stages)
        rng = np.random.default_rng(2)
        worst = 0.0
        for st in pipe.stages:
            k, c = st.spec.kernel_size, st.spec.input_channels
            cuboids = rng.random((1000, k, k, c))
            out = S.forward_stage(cuboids, st)
            e_in = (cuboids ** 2).sum(axis=(1, 2, 3))
            e_out = (out ** 2).sum(axis=(1, 2, 3))
            worst = max(worst, float(np.abs(e_out - e_in).max() / e_in.min()))
        d.update(gram=f"{gram:.1e}", energy_rel=f"{worst:.1e}")
        assert gram <= 1e-6 and worst <= 1e-4


@requires_mnist
def test_3_sp_complementarity(acceptance, mnist_test, mnist_train_small):
    with acceptance(3, "S/P complementarity over the full MNIST test set") as d:
        pipe = S.fit_pipeline(mnist_train_small, S.MNIST_STAGES)
        violations = 0
        for start in range(0, len(mnist_test), 2500):
            for block in pipe.transform_all(mnist_test.images[start:start + 2500]):
                violations += int(np.count_nonzero(np.minimum(block[..., 1::2], block[..., 2::2])))
        d.update(images=len(mnist_test), violations=violations)
        assert violations == 0


def test_4_entropy_oracle(acceptance):
    with acceptance(4, "location entropy vs naive oracle, both variants, 1000 instances") as d:
        rng = np.random.default_rng(4)
        worst, clamped = 0.0, 0
        for _ in range(1000):
            n, c, b = int(rng.integers(2, 80)), int(rng.integers(2, 11)), int(rng.integers(2, 13))
            values = rng.normal(size=n)
            if rng.random() < 0.3:
                values = np.round(values, 1)  # ties and coincident bin edges
            labels = rng.integers(0, c, n)
            for variant in F.VARIANTS:
                got = F.location_entropy(values, labels, b, c, variant)
                want = naive_entropy(values.tolist(), labels.tolist(), b, c, variant)
                worst = max(worst, abs(got - want) / max(abs(want), 1.0))
                clamped += variant == "literal" and len(set(labels)) < c
        d.update(max_rel_diff=f"{worst:.1e}", instances_with_empty_class=clamped)
        assert worst <= 1e-12


def test_5_gradient_checks(acceptance):
    with acceptance(5, "analytic vs central-difference gradients, 50 instances") as d:
        rng = np.random.default_rng(5)
        worst = 0.0
        for _ in range(50):
            shape, classes = (3, 3, 1), int(rng.integers(2, 5))
            mlp = M.TargetMLP.initialize(shape, (5, 4), classes, seed=int(rng.integers(1 << 30)))
            for b in mlp.biases:
                b += rng.normal(scale=0.3, size=b.shape)
            x, y = rng.random((3,) + shape), rng.integers(0, classes, 3)
            _, dws, dbs = mlp.param_gradients(x, y, 0.01)
            for i in range(len(mlp.weights)):
                def obj_w(w, i=i):
                    ws = list(mlp.weights)
                    ws[i] = w
                    return M.TargetMLP(ws, mlp.biases, shape).param_gradients(x, y, 0.01)[0]

                def obj_b(b, i=i):
                    bs = list(mlp.biases)
                    bs[i] = b
                    return M.TargetMLP(mlp.weights, bs, shape).param_gradients(x, y, 0.01)[0]

                worst = max(worst, rel_error(dws[i], numeric_grad(obj_w, mlp.weights[i])),
                            rel_error(dbs[i], numeric_grad(obj_b, mlp.biases[i])))
            x0, y0 = x[0], int(y[0])
            worst = max(worst, rel_error(mlp.input_gradient(x0, y0),
                                         numeric_grad(lambda v: mlp.loss(v, [y0]), x0)))
            jac = mlp.class_score_gradients(x0)
            for c in range(classes):
                worst = max(worst, rel_error(jac[c], numeric_grad(lambda v: mlp.logits(v)[c], x0)))

            head = M.SoftmaxClassifier(rng.normal(size=(classes, 6)), rng.normal(size=classes))
            feats, onehot = rng.normal(size=(4, 6)), np.eye(classes)[rng.integers(0, classes, 4)]
            _, dw, db = head._grads(feats, onehot, 0.01)
            worst = max(worst,
                        rel_error(dw, numeric_grad(lambda w: M.SoftmaxClassifier(w, head.bias)
                                                   ._grads(feats, onehot, 0.01)[0], head.weights)),
                        rel_error(db, numeric_grad(lambda b: M.SoftmaxClassifier(head.weights, b)
                                                   ._grads(feats, onehot, 0.01)[0], head.bias)))
        d.update(max_rel_error=f"{worst:.1e}")
        assert worst <= 1e-4


def test_6_attack_oracles(acceptance):
    with acceptance(6, "BIM(T=1, alpha=eps) == FGSM; DeepFool affine closed form") as d:
        rng = np.random.default_rng(6)
        shape = (4, 4, 1)
        mismatches, worst = 0, 0.0
        for _ in range(50):
            mlp = M.TargetMLP.initialize(shape, (8,), 3, seed=int(rng.integers(1 << 30)))
            x, y, eps = rng.random((5,) + shape), rng.integers(0, 3, 5), float(rng.uniform(0.01, 0.5))
            mismatches += not np.array_equal(A.bim_batch(x, y, mlp, eps, eps, 1), A.fgsm_batch(x, y, mlp, eps))

            w = rng.normal(scale=5.0, size=(2, 16))
            x0 = rng.uniform(0.3, 0.7, shape)
            gap = float(rng.uniform(0.1, 1.0))
            affine = M.TargetMLP([w], [np.array([gap - w[0] @ x0.ravel(), -w[1] @ x0.ravel()])], shape)
            res = A.deepfool(x0, affine, overshoot=0.02)
            expected = 1.02 * gap / np.linalg.norm(w[1] - w[0])
            worst = max(worst, abs(res.l2_norm - expected) / expected)
            assert res.success
        d.update(bim_fgsm_mismatches=mismatches, deepfool_rel_error=f"{worst:.1e}")
        assert mismatches == 0 and worst <= 1e-4


@requires_mnist
def test_7_defense_properties(acceptance, mnist_test):
    with acceptance(7, "defense properties (idempotence, JPEG Q=100, TVM, range, constants)") as d:
        rng = np.random.default_rng(7)
        x = mnist_test.images[:50]
        once = D.bit_depth_reduce(x, 4)
        idempotent = np.array_equal(D.bit_depth_reduce(once, 4), once)
        jpeg_err = float(np.abs(D.jpeg_approx(x, 100) - x).max())
        noisy = np.clip(x + rng.normal(scale=0.1, size=x.shape), 0, 1)
        tv_ok = energy_ok = 0
        for img in noisy:
            out = D.tvm(img, 0.1, 100)
            energy_ok += D.tv_energy(out, img, 0.1) <= D.tv_energy(img, img, 0.1)
            tv_ok += D.total_variation(out) <= D.total_variation(img) + 1e-8
        in_range = constants = True
        for text in ExperimentConfig().defenses:
            spec = D.DefenseSpec.parse(text)
            out = spec.apply(x[:10])
            in_range &= out.shape == x[:10].shape and out.min() >= 0 and out.max() <= 1
            for v in (0.0, 0.2, 0.6, 1.0):  # quantizer levels of 4 and 5 bits for 0 and 1 only
                const = np.full((2, 32, 32, 1), v)
                got = spec.apply(const)
                if spec.method == "bitdepth":
                    # a constant stays constant, moved to its quantization level
                    constants &= np.array_equal(got, D.bit_depth_reduce(const, spec.params["bits"]))
                else:
                    tol = 1 / 255 if spec.method == "jpeg" else 1e-9
                    constants &= float(np.abs(got - const).max()) <= tol
        d.update(jpeg_q100_err=f"{jpeg_err * 255:.2f}/255", tvm_energy=f"{energy_ok}/50", tvm_tv=f"{tv_ok}/50")
        assert idempotent and jpeg_err <= 2 / 255 and energy_ok == tv_ok == 50
        assert in_range and constants


@requires_mnist
def test_8_clean_accuracy(acceptance, runs):
    with acceptance(8, "clean accuracy Saak >= 93%, MLP >= 95%, run < 10 min") as d:
        _, ((_, report, seconds), _) = runs
        saak = report.row(H.SAAK_ROW, "none").c_clean
        mlp = report.row("none", "none").c_clean
        d.update(saak=f"{saak:.2f}%", mlp=f"{mlp:.2f}%", run_seconds=f"{seconds:.0f}")
        assert saak >= 93.0 and mlp >= 95.0 and seconds < 600


@requires_mnist
def test_9_robustness_ordering(acceptance, runs):
    with acceptance(9, "Saak drop < no-defense drop (FGSM, BIM on >= 3/4 eps; DeepFool)") as d:
        cfg, ((_, report, _), _) = runs
        wins = {}
        for method in ("fgsm", "bim"):
            wins[method] = sum(report.row(H.SAAK_ROW, method, e).drop < report.row("none", method, e).drop
                               for e in cfg.attacks.epsilons)
        df = report.row(H.SAAK_ROW, "deepfool").drop < report.row("none", "deepfool").drop
        d.update(fgsm=f"{wins['fgsm']}/4", bim=f"{wins['bim']}/4", deepfool=df)
        assert wins["fgsm"] >= 3 and wins["bim"] >= 3 and df


@requires_mnist
def test_10_spectral_trend(acceptance, runs):
    with acceptance(10, "normalized RMSE upper half > lower half of stage-1 spectral dims") as d:
        cfg, ((out, _, _), _) = runs
        _, test = H.load_data(cfg.data)
        target = M.TargetMLP.load(out / H.TARGET_FILE)
        pipeline = S.SaakPipeline.load(out / H.PIPELINE_FILE)
        adv, _ = A.attack_set(test, target, "fgsm", H.attack_config(cfg, cfg.diag_epsilon))
        diag = H.spectral_diagnostics(test, adv, pipeline, 0)
        lower, upper = diag.half_means()
        d.update(images=len(test), lower=f"{lower:.3f}", upper=f"{upper:.3f}")
        assert len(test) >= 500 and upper > lower


@requires_mnist
def test_11_determinism(acceptance, runs):
    with acceptance(11, "two identical runs give byte-identical report, pipeline and models") as d:
        _, ((a, _, _), (b, _, _)) = runs
        names = (H.REPORT_FILE, H.PIPELINE_FILE, H.MASKS_FILE, H.HEAD_FILE, H.TARGET_FILE, H.DIAG_FILE)
        differing = [n for n in names if (a / n).read_bytes() != (b / n).read_bytes()]
        d.update(files=len(names), differing=differing or "none")
        assert not differing
