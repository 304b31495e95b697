"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line that is repeated in the terminal summary.
"""

import hashlib
import time
from pathlib import Path

import numpy as np
import pytest

from _oracles import (banded_oracle, eq13_oracle, ground_truth_oracle, quantize_oracle, random_pair,
                      random_scenario, worst_gradient_error)
from pogrid import autoencoder as sda
from pogrid import cli, pipelines
from pogrid.deconvnet import (ConvNetModel, build_sparse_conv_matrix, conv2d, conv2d_transpose,
                              loss_and_grad)
from pogrid.forest import ForestParams, oob_accuracy, train_forest
from pogrid.grid import (PredictedOccupancyGrid, GridConfig, banded_pog_error, occupied_cell_sets,
                         pog_error, quantize_probability)
from pogrid.scenario import RoadLayout, compute_ground_truth_pog, generate_dataset, load_dataset


def verdict(log, n, ok, detail):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'} - {detail}"
    log[n] = line
    print(line)
    assert ok, line


def ordered_matvec(S, v):
    out = np.zeros(S.shape[0])
    for r in range(S.shape[0]):
        acc = 0.0
        for c in range(S.shape[1]):
            if S[r, c] != 0.0:
                acc += S[r, c] * v[c]
        out[r] = acc
    return out


# 1 -------------------------------------------------------------------------------

def test_criterion_1_pog_matches_triple_loop(criterion_log):
    rng = np.random.default_rng(2024)
    cfg = RoadLayout().grid_config(20, 20)
    elapsed, mismatched = 0.0, 0
    for _ in range(200):
        sc = random_scenario(rng, max_participants=4, max_hypotheses=5)
        t = float(rng.integers(0, 11)) / 10
        t0 = time.perf_counter()
        got = compute_ground_truth_pog(sc, cfg, t).probs
        elapsed += time.perf_counter() - t0
        mismatched += int(not np.array_equal(got, ground_truth_oracle(sc, cfg, t)))
    verdict(criterion_log, 1, mismatched == 0 and elapsed < 10,
            f"{200 - mismatched}/200 scenarios exact, {elapsed:.2f} s")


# 2 -------------------------------------------------------------------------------

def test_criterion_2_sparse_matrix_example(criterion_log):
    K = np.array([[1.5, -2.0], [0.25, 3.0]])
    k00, k01, k10, k11 = K.ravel()
    printed = np.array([[k00, k01, 0, k10, k11, 0, 0, 0, 0],
                        [0, k00, k01, 0, k10, k11, 0, 0, 0],
                        [0, 0, 0, k00, k01, 0, k10, k11, 0],
                        [0, 0, 0, 0, k00, k01, 0, k10, k11]])
    S = build_sparse_conv_matrix(K, (3, 3))
    rng = np.random.default_rng(3)
    exact = True
    for _ in range(50):
        x = rng.normal(size=(3, 3))
        y = rng.normal(size=(2, 2))
        conv = conv2d(x[None, :, :, None], K[None, :, :, None], 1, "valid")
        deconv = conv2d_transpose(y[None, :, :, None], K[None, :, :, None], 1, "valid", (3, 3))
        exact &= np.array_equal(conv.ravel(), ordered_matvec(S, x.ravel()))
        exact &= np.array_equal(deconv.ravel(), ordered_matvec(S.T, y.ravel()))
    layout = np.array_equal(S, printed)
    verdict(criterion_log, 2, layout and exact, f"printed layout {layout}, bit-exact S and S^T products {exact}")


# 3 -------------------------------------------------------------------------------

def test_criterion_3_adjoint_identity(criterion_log):
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(100):
        A, D, k, stride = (int(v) for v in (rng.integers(1, 6), rng.integers(1, 6), rng.integers(1, 5), rng.integers(1, 3)))
        H, W = (int(v) for v in rng.integers(4, 13, size=2))
        padding = ("same", "valid")[rng.integers(2)]
        K = rng.normal(size=(A, k, k, D))
        x = rng.normal(size=(1, H, W, D))
        cx = conv2d(x, K, stride, padding)
        y = rng.normal(size=cx.shape)
        lhs = float(np.sum(cx * y))
        rhs = float(np.sum(x * conv2d_transpose(y, K, stride, padding, (H, W))))
        worst = max(worst, abs(lhs - rhs) / max(abs(lhs), abs(rhs), 1e-300))
    verdict(criterion_log, 3, worst < 1e-10, f"worst relative gap {worst:.2e} over 100 draws")


# 4 -------------------------------------------------------------------------------

def test_criterion_4_gradient_checks(criterion_log):
    t0 = time.perf_counter()
    rng = np.random.default_rng(5)
    ae_worst = 0.0
    for act in sda.ACTIVATIONS:
        layer = sda.AutoencoderLayer(rng.normal(size=(3, 5)), rng.normal(size=3), rng.normal(size=5), act)
        clean = rng.normal(size=(4, 5))
        noisy = clean + rng.normal(scale=0.2, size=clean.shape)
        params = {"weights": layer.weights, "bias_enc": layer.bias_enc, "bias_dec": layer.bias_dec}
        f = lambda p, a=act: sda.loss_and_grad(sda.AutoencoderLayer(**p, activation=a), clean, noisy, 0.005)[0]
        grads = sda.loss_and_grad(layer, clean, noisy, 0.005)[1]
        ae_worst = max(ae_worst, worst_gradient_error(f, params, grads))

    model = ConvNetModel.initialize((6, 6, 2), n_classes=3, n_filters=2, kernel_size=3, strides=(2, 1), rng=rng)
    model = model.with_params({k: v + (0.1 * rng.normal(size=v.shape) if k.endswith(".b") else 0.0)
                               for k, v in model.params().items()})
    x = rng.normal(size=(2, 6, 6, 2))
    cls = rng.integers(0, 3, size=(2, 6, 6))
    _, grads = loss_and_grad(model, x, cls)
    cnn_worst = worst_gradient_error(lambda p: loss_and_grad(model.with_params(p), x, cls)[0],
                                     model.params(), grads)
    elapsed = time.perf_counter() - t0
    verdict(criterion_log, 4, ae_worst < 1e-4 and cnn_worst < 1e-4 and elapsed < 60,
            f"autoencoder {ae_worst:.1e}, convnet {cnn_worst:.1e}, {elapsed:.1f} s")


# 5 -------------------------------------------------------------------------------

def test_criterion_5_metric_suite(criterion_log):
    rng = np.random.default_rng(6)
    cfg = GridConfig(6, 6, 1.0, 1.0, attributes_per_cell=1)
    sets_ok = err_ok = band_ok = True
    for _ in range(1000):
        gt, est = random_pair(rng)
        g, e = PredictedOccupancyGrid(cfg, 1.0, gt), PredictedOccupancyGrid(cfg, 1.0, est)
        B = {(i, j) for i in range(6) for j in range(6) if gt[i, j] > 0}
        D = {(i, j) for i in range(6) for j in range(6) if est[i, j] > 0}
        sets_ok &= occupied_cell_sets(g, e) == (B, D, len(B ^ D))
        err_ok &= abs(pog_error(g, e) - eq13_oracle(gt, est)) <= 1e-12
        for got, want in zip(banded_pog_error(g, e).as_tuple(), banded_oracle(gt, est)):
            band_ok &= (got is None and want is None) or (
                got is not None and want is not None and abs(got - want) <= 1e-12)
    ps = np.concatenate([rng.random(5000), np.linspace(0, 1, 1001)])
    q = np.array([quantize_probability(p) for p in ps])
    quant_ok = all(quantize_probability(p) == quantize_oracle(p) for p in ps)
    idem = all(quantize_probability(v) == v for v in q)
    order = np.argsort(ps, kind="stable")
    mono = bool(np.all(np.diff(q[order]) >= 0))
    ok = sets_ok and err_ok and band_ok and quant_ok and idem and mono
    verdict(criterion_log, 5, ok, f"sets {sets_ok}, eps {err_ok}, bands {band_ok}, quantization {quant_ok}, "
                                  f"idempotent {idem}, monotone {mono}")


# 6 -------------------------------------------------------------------------------

def test_criterion_6_forest_memorization_and_xor(criterion_log):
    rng = np.random.default_rng(7)
    X = rng.normal(size=(500, 4))
    y = rng.integers(0, 6, size=500)
    tree = train_forest(X, y, ForestParams(n_trees=1, mtry=4, bootstrap=False), n_classes=6)
    train_acc = float(np.mean(tree.predict_index(X) == y))
    Xx = rng.uniform(-1, 1, size=(200, 2))
    yx = ((Xx[:, 0] > 0) ^ (Xx[:, 1] > 0)).astype(int)
    oob = oob_accuracy(train_forest(Xx, yx, ForestParams(n_trees=50, rng_seed=1)), Xx, yx)
    verdict(criterion_log, 6, train_acc == 1.0 and oob > 0.95,
            f"training accuracy {train_acc:.3f}, XOR out-of-bag {oob:.3f}")


# 7 and 8 share one desk-scale run ------------------------------------------------------

class EmptyPog:
    def predict_batch(self, aogs):
        return np.zeros(aogs.shape[:3])


@pytest.fixture(scope="module")
def desk_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk")
    cfg = cli.RunConfig.from_dict({"dataset": {"n_total": 2500, "train_fraction": 0.8, "seed": 0}})
    d = cfg.data
    t0 = time.perf_counter()
    generate_dataset(cfg.layout, 2500, 0.8, 0, cfg.grid_config, d["t_pred"], root / "data",
                     s_count=d["s_count"], horizon=d["horizon"], dt=d["dt"])
    train, val = load_dataset(root / "data", "train"), load_dataset(root / "data", "validation")
    predictors = {
        "arch1": pipelines.train_arch1(train, **cfg.arch1_kwargs()),
        "arch2": pipelines.train_arch2(train, **cfg.arch2_kwargs()),
        "arch3": pipelines.train_arch3(train, **cfg.arch3_kwargs()),
    }
    report = pipelines.evaluate({**predictors, "empty": EmptyPog()}, val, latency_calls=0)
    elapsed = time.perf_counter() - t0
    return {"train": train, "val": val, "predictors": predictors, "report": report, "elapsed": elapsed}


def test_criterion_7_desk_ordering(criterion_log, desk_run):
    train, val, report = desk_run["train"], desk_run["val"], desk_run["report"]
    high = {name: m[2] for name, m in report.means.items()}
    beats = all(high[a] < high["empty"] for a in ("arch1", "arch2", "arch3"))
    i_ii = high["arch1"] <= 1.1 * high["arch2"]
    ii_iii = high["arch2"] <= 1.1 * high["arch3"]
    sizes = (len(train), len(val), len(desk_run["predictors"]["arch1"].components["forests"]))
    fast = desk_run["elapsed"] < 30 * 60
    detail = (f"eps_high I {high['arch1']:.4f}, II {high['arch2']:.4f}, III {high['arch3']:.4f}, "
              f"empty {high['empty']:.4f}; beats empty {beats}, I<=1.1*II {i_ii}, II<=1.1*III {ii_iii}; "
              f"{sizes[0]}/{sizes[1]} scenarios, {sizes[2]} forests, {desk_run['elapsed']:.0f} s")
    verdict(criterion_log, 7, sizes == (2000, 500, 400) and beats and i_ii and ii_iii and fast, detail)


def recon_ratio(model, X):
    r = sda.decode_stack(model, sda.encode_stack(model, X))
    return float(np.sqrt(np.mean((r - X) ** 2, axis=1)).mean() / np.abs(X).mean())


def test_criterion_8_sda_reconstruction(criterion_log, desk_run):
    val = desk_run["val"]
    s1 = desk_run["predictors"]["arch2"].components["sda1"]
    s2 = desk_run["predictors"]["arch2"].components["sda2"]
    aog = recon_ratio(s1, val.aogs.reshape(len(val), -1))
    pog = recon_ratio(s2, val.pogs.reshape(len(val), -1))
    verdict(criterion_log, 8, aog <= 0.10 and pog <= 0.10,
            f"RMSE / mean |x|: AOG stack {aog:.3f}, POG stack {pog:.3f} (limit 0.10, codes {s1.layer_sizes[-1]}-dim)")


# 9 -------------------------------------------------------------------------------

def tree_digest(root: Path, skip=("latency.csv",)):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file() and p.name not in skip:
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def test_criterion_9_determinism(criterion_log, tmp_path, capsys):
    small = {"grid": {"rows": 12, "cols": 12}, "dataset": {"n_total": 30, "train_fraction": 0.8, "seed": 4},
             "arch1": {"sizes": [6], "sda": {"epochs": 5}, "forest": {"n_trees": 3}},
             "arch2": {"sizes1": [6], "sizes2": [6], "sda1": {"epochs": 5}, "sda2": {"epochs": 5},
                       "forest": {"n_trees": 3}},
             "arch3": {"spec": {"epochs": 2, "batch_size": 8}, "n_filters": 4}}
    digests = []
    for run, workers in (("a", 1), ("b", 1), ("c", 3)):
        cfg = cli.RunConfig.from_dict(small, [f"workers={workers}"])
        root = tmp_path / run
        cli.cmd_generate(cfg, root / "data")
        bundles = [cli.cmd_train(cfg, arch, root / "data", root / "bundles" / arch).parent
                   for arch in ("arch1", "arch2", "arch3")]
        cli.cmd_eval(cfg, bundles, root / "data", root / "reports", latency_calls=2)
        digests.append(tuple(tree_digest(root / part) for part in ("data", "bundles", "reports")))
    capsys.readouterr()
    same = [all(d[k] == digests[0][k] for d in digests) for k in range(3)]
    verdict(criterion_log, 9, all(same),
            f"identical across reruns and 1 vs 3 threads: generate {same[0]}, train {same[1]}, eval {same[2]}")
