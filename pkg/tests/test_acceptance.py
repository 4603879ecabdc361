"""Acceptance gate: one test per release criterion, each at its stated
tolerance and time budget.

Every test funnels through ``check``, which appends a single
"[PASS]/[FAIL] criterion" line to the report printed after the run (see
``pytest_terminal_summary`` in conftest). A criterion fails on a wrong
value or on blowing its time budget; the line says which.
"""

import base64
import io
import threading
import time

import numpy as np
import pytest
from fastapi.testclient import TestClient
from PIL import Image

from conftest import ACCEPTANCE_LINES
from coalseg.data import (
    AugmentConfig,
    SampleRecord,
    augment,
    five_fold_split,
    synth_generate,
)
from coalseg.dcsa import (
    DCSAConfig,
    dcsa_apply,
    dcsa_attention_map,
    equivalent_kernel_size,
    identity_dcsa_weights,
    impulse_receptive_field,
    init_dcsa_weights,
    param_reduction_rho,
)
from coalseg.metrics import confusion_matrix, mean_iou, pixel_accuracy
from coalseg.model import (
    REFERENCE_GFLOPS,
    REFERENCE_PARAMS,
    ModelConfig,
    build_model,
    count_flops,
    count_params,
    forward,
    params_report,
    preset,
)
from coalseg.service import Service, create_app, encode_mask_payload
from coalseg.tensor import (
    ConvSpec,
    Tensor,
    add,
    bilinear_upsample,
    conv2d,
    finite_difference_check,
    gelu,
    layer_norm,
    mul,
    scale,
    softmax_cross_entropy,
    tensor_mean,
    tensor_sum,
)
from coalseg.train import TrainConfig, evaluate, train

from test_tensor import inflate_kernel, naive_conv2d
from test_metrics import brute_pa_miou
from test_data import block_mask

REDUCED = ModelConfig(base_channels=8, depths=(1, 1, 1, 1), input_size=(64, 64))
SERVICE_CFG = ModelConfig(base_channels=4, depths=(1, 1, 1, 1), input_size=(32, 32))


def _record(line: str) -> None:
    print(line)
    ACCEPTANCE_LINES.append(line)


def check(name: str, limit_s: float, body) -> None:
    """Run one criterion body; record exactly one [PASS]/[FAIL] line."""
    start = time.monotonic()
    try:
        detail = body()
    except BaseException as e:
        _record(f"[FAIL] {name} ({time.monotonic() - start:.2f}s): {e}")
        raise
    elapsed = time.monotonic() - start
    if elapsed > limit_s:
        line = f"[FAIL] {name}: took {elapsed:.2f}s, limit {limit_s:g}s — {detail}"
        _record(line)
        pytest.fail(line)
    _record(f"[PASS] {name} ({elapsed:.2f}s < {limit_s:g}s): {detail}")


def png_b64(image: np.ndarray) -> str:
    buf = io.BytesIO()
    Image.fromarray((image * 255).round().astype(np.uint8)).save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


# -- analytic numbers --------------------------------------------------------


def test_parameter_reduction_rates():
    def body():
        r19 = param_reduction_rho([3, 5, 7], 19, 19)
        r21 = param_reduction_rho([3, 5, 7], 21, 21)
        assert abs(r19 - 0.770083) <= 1e-6, f"rho vs 19x19 is {r19!r}"
        assert abs(r21 - 0.811791) <= 1e-6, f"rho vs 21x21 is {r21!r}"
        return (f"rho(19x19)={r19:.6f}, rho(21x21)={r21:.6f} ±1e-6 "
                "(the published 81.18% figure uses the 21x21 accounting)")

    check("parameter-reduction rates", 1.0, body)


def test_equivalent_kernel_formula():
    def body():
        got = equivalent_kernel_size(7, 3)
        assert got == 19, f"equivalent_kernel_size(7, 3) == {got}"
        return "equivalent_kernel_size(7, 3) == 19 exactly"

    check("equivalent-kernel formula", 1.0, body)


def test_dilated_conv_oracle():
    def body():
        rng = np.random.default_rng(0)
        worst = 0.0
        for k in (3, 5, 7):
            for r in (1, 2, 3):
                for _ in range(20):
                    x = rng.normal(size=(1, 2, 10, 11))
                    w = rng.normal(size=(2, 2, k, k))
                    got = conv2d(Tensor(x), Tensor(w), None,
                                 ConvSpec(k, k, dilation=r)).data
                    want = naive_conv2d(x, inflate_kernel(w, r))
                    worst = max(worst, float(np.abs(got - want).max()))
        assert worst <= 1e-12, f"max |conv2d - naive| = {worst:.3e}"
        return (f"k in {{3,5,7}} x r in {{1,2,3}} x 20 random inputs, "
                f"max |Δ| {worst:.1e} ≤ 1e-12")

    check("dilated-convolution oracle", 60.0, body)


def test_gradient_suite():
    def body():
        rng = np.random.default_rng(7)
        errs = {}

        b3 = Tensor(rng.normal(size=(1, 3, 1, 1)))
        errs["add"] = finite_difference_check(
            lambda t: mul(add(t, b3), t).sum(), rng.normal(size=(2, 3, 4, 4)))
        other = Tensor(rng.normal(size=(2, 3, 4, 4)))
        errs["mul"] = finite_difference_check(
            lambda t: mul(t, other).sum(), rng.normal(size=(2, 3, 4, 4)))
        errs["scale"] = finite_difference_check(
            lambda t: scale(t, -1.7).sum(), rng.normal(size=(3, 5)))
        errs["sum"] = finite_difference_check(
            lambda t: mul(t, t).sum(), rng.normal(size=(4, 4)))
        errs["mean"] = finite_difference_check(
            lambda t: mul(tensor_mean(t), tensor_mean(t)), rng.normal(size=(4, 4)))
        x_np = rng.normal(size=(2, 3, 6, 6))
        w = Tensor(rng.normal(size=(4, 3, 3, 3)))
        bias = Tensor(rng.normal(size=4))
        errs["conv2d/input"] = finite_difference_check(
            lambda t: conv2d(t, w, bias, ConvSpec(3, 3)).sum(), x_np)
        errs["conv2d/weight"] = finite_difference_check(
            lambda t: conv2d(Tensor(x_np), t, bias, ConvSpec(3, 3)).sum(),
            w.data.copy())
        errs["conv2d/bias"] = finite_difference_check(
            lambda t: conv2d(Tensor(x_np), w, t, ConvSpec(3, 3)).sum(),
            bias.data.copy())
        w_stem = Tensor(rng.normal(size=(2, 3, 7, 7)))
        errs["conv2d strided"] = finite_difference_check(
            lambda t: conv2d(t, w_stem, None, ConvSpec(7, 7, stride=4)).sum(),
            rng.normal(size=(1, 3, 12, 12)))
        w_dw = Tensor(rng.normal(size=(4, 1, 3, 3)))
        errs["conv2d depthwise dilated"] = finite_difference_check(
            lambda t: conv2d(t, w_dw, None,
                             ConvSpec(3, 3, dilation=3, groups=4)).sum(),
            rng.normal(size=(1, 4, 10, 10)))
        x_grp = Tensor(rng.normal(size=(2, 4, 5, 5)))
        errs["conv2d grouped"] = finite_difference_check(
            lambda t: conv2d(x_grp, t, None, ConvSpec(3, 3, groups=2)).sum(),
            rng.normal(size=(6, 2, 3, 3)))
        gamma, beta = Tensor(rng.normal(size=4)), Tensor(rng.normal(size=4))
        xn = rng.normal(size=(2, 4, 3, 3))
        errs["layer_norm"] = finite_difference_check(
            lambda t: mul(layer_norm(t, gamma, beta), Tensor(xn)).sum(), xn)
        errs["gelu"] = finite_difference_check(
            lambda t: mul(gelu(t), t).sum(), rng.normal(size=(2, 3, 4, 4)) * 2.0)
        for factor in (2, 8):
            errs[f"bilinear_upsample x{factor}"] = finite_difference_check(
                lambda t, f=factor: mul(bilinear_upsample(t, f),
                                        bilinear_upsample(t, f)).sum(),
                rng.normal(size=(1, 2, 4, 5)))
        targets = rng.integers(0, 4, size=(2, 5, 5))
        targets[0, 0, :] = 255
        errs["cross_entropy"] = finite_difference_check(
            lambda t: softmax_cross_entropy(t, targets),
            rng.normal(size=(2, 4, 5, 5)))
        dcfg = DCSAConfig(channels=2)
        dweights = init_dcsa_weights(dcfg, rng)
        errs["attention block"] = finite_difference_check(
            lambda t: dcsa_apply(t, dweights).sum(), rng.normal(size=(1, 2, 8, 8)))

        m = build_model(ModelConfig(base_channels=4, depths=(1, 1, 1, 1),
                                    input_size=(32, 32)), seed=0)
        labels = rng.integers(0, 5, size=(1, 32, 32))
        errs["reduced model"] = finite_difference_check(
            lambda t: softmax_cross_entropy(forward(m, t), labels),
            rng.normal(size=(1, 3, 32, 32)) * 0.3, max_coords=30)

        worst_name = max(errs, key=errs.get)
        worst = errs[worst_name]
        assert worst < 1e-6, f"{worst_name} gradient error {worst:.3e}"
        return (f"{len(errs)} finite-difference checks (every op + reduced "
                f"4-channel model), max rel err {worst:.1e} < 1e-6 ({worst_name})")

    check("gradient suite", 300.0, body)


def test_attention_identity():
    def body():
        cfg = DCSAConfig(channels=3, use_bias=True)
        w = identity_dcsa_weights(cfg)
        x = np.random.default_rng(1).normal(size=(2, 3, 16, 16))
        att = dcsa_attention_map(Tensor(x), w).data
        out = dcsa_apply(Tensor(x), w).data
        att_err = float(np.abs(att - 1.0).max())
        out_err = float(np.abs(out - x).max())
        assert att_err <= 1e-12, f"attention map deviates from ones by {att_err:.3e}"
        assert out_err <= 1e-12, f"output deviates from input by {out_err:.3e}"
        return (f"identity weights give Att==ones (|Δ| {att_err:.1e}) and "
                f"Output==Input (|Δ| {out_err:.1e}), ≤ 1e-12")

    check("attention identity", 1.0, body)


def test_receptive_field_probe():
    def body():
        got = impulse_receptive_field(DCSAConfig(channels=1))
        assert got == (23, 23), f"impulse extent {got}"
        return "default attention impulse response spans exactly 23x23"

    check("receptive-field probe", 1.0, body)


def test_scale_ordering_and_parameter_totals():
    def body():
        counts, extras = {}, []
        for name in ("tiny", "small", "base"):
            m = build_model(preset(name), seed=0)
            counts[name] = count_params(m)
            extras.extend("    " + line for line in params_report(name, m).splitlines())
            del m
        assert counts["tiny"] < counts["small"] < counts["base"], counts
        ratios = {n: counts[n] / REFERENCE_PARAMS[n] for n in counts}
        for name, ratio in ratios.items():
            assert abs(ratio - 1.0) <= 0.20, f"{name} is {ratio:.3f}x the published total"
        detail = ", ".join(f"{n} {counts[n]/1e6:.2f}M ({ratios[n]:.3f}x published)"
                           for n in ("tiny", "small", "base"))
        for line in extras:
            _record(line)
        return f"ordering tiny<small<base holds; {detail}; all within ±20%"

    check("scale ordering and parameter totals", 10.0, body)


def test_flops_same_order():
    def body():
        flops = count_flops(build_model(preset("tiny"), seed=0), input_size=(512, 512))
        ratio = flops / (REFERENCE_GFLOPS["tiny"] * 1e9)
        assert 0.5 <= ratio <= 2.0, f"ratio {ratio:.3f} outside [0.5, 2.0]"
        return (f"tiny at 512x512 counts {flops / 1e9:.3f} G ops "
                f"(multiply-accumulates as 2 ops, bias/norm/act/resize included) "
                f"= {ratio:.2f}x the published 8.99 G")

    check("FLOPs same-order check", 10.0, body)


def test_metric_oracle():
    def body():
        rng = np.random.default_rng(3)
        for trial in range(100):
            pred = rng.integers(0, 5, size=(64, 64))
            target = rng.integers(0, 5, size=(64, 64))
            if trial % 3 == 0:
                target[rng.random(size=target.shape) < 0.1] = 255
            cm = confusion_matrix(pred, target)
            pa = pixel_accuracy(cm)
            miou, _ = mean_iou(cm)
            bpa, bmiou = brute_pa_miou(pred, target, 5)
            assert pa == bpa, f"trial {trial}: PA {pa!r} != brute {bpa!r}"
            assert miou == bmiou, f"trial {trial}: mIoU {miou!r} != brute {bmiou!r}"
        cm = confusion_matrix(np.array([[0, 1], [1, 1]]),
                              np.array([[0, 0], [1, 1]]), num_classes=2)
        pa = pixel_accuracy(cm)
        miou, _ = mean_iou(cm)
        assert pa == 0.75, f"worked example PA {pa!r}"
        assert abs(miou - 7 / 12) <= 1e-12, f"worked example mIoU {miou!r}"
        return ("PA/mIoU equal brute-force recounting on 100 random 64x64 "
                "pairs exactly; worked 2x2 example gives PA=0.75, mIoU=7/12")

    check("metric oracle", 10.0, body)


def test_overfit_sanity():
    def body():
        data = synth_generate(8, seed=0, size=64)
        model = build_model(REDUCED, seed=0)
        cfg = TrainConfig(epochs=200, batch_size=8, lr=1e-2, seed=0)
        model, history = train(model, data, cfg)
        iterations = len(history.epochs)  # one full-batch step per epoch
        final_pa = history.epochs[-1].pa
        held = evaluate(model, data)
        assert iterations <= 200, f"{iterations} iterations"
        assert final_pa >= 0.99, f"training PA {final_pa:.4f} after {iterations} iterations"
        return (f"8-channel model memorizes 8 synthetic 64x64 scenes: training "
                f"PA {final_pa:.4f} ≥ 0.99 in {iterations} iterations "
                f"(full-pass PA {held.pa:.4f})")

    check("overfit sanity", 600.0, body)


def test_five_fold_properties():
    def body():
        for n in (5, 10, 79, 100):
            folds = five_fold_split(n, seed=0)
            assert len(folds) == 5, f"n={n}: {len(folds)} folds"
            flat = sorted(i for fold in folds for i in fold)
            assert flat == list(range(n)), f"n={n}: folds not a disjoint cover"
            sizes = sorted((len(f) for f in folds), reverse=True)
            assert sizes[0] - sizes[-1] <= 1, f"n={n}: sizes {sizes}"
            if n == 79:
                assert sizes == [16, 16, 16, 16, 15], f"n=79 sizes {sizes}"
        return ("disjoint, complete, balanced for n in {5,10,79,100}; "
                "79 splits into 16/16/16/16/15")

    check("five-fold properties", 1.0, body)


def test_augmentation_properties():
    def body():
        rec = synth_generate(1, seed=4, size=64)[0]
        cfg = AugmentConfig(crop=32)
        a, b = augment(rec, seed=11, cfg=cfg), augment(rec, seed=11, cfg=cfg)
        assert np.array_equal(a.image, b.image) and np.array_equal(a.mask, b.mask), \
            "same seed produced different outputs"
        c = augment(rec, seed=12, cfg=cfg)
        assert not np.array_equal(a.image, c.image), "different seeds agree"
        for size in (16, 33, 64, 80):
            rec_s = synth_generate(1, seed=size, size=size)[0]
            out = augment(rec_s, seed=0, cfg=cfg)
            assert out.image.shape == (32, 32, 3) and out.mask.shape == (32, 32), \
                f"input {size}: output {out.image.shape}"

        # Coordinate-ramp lockstep: bilinear interpolation of a linear ramp is
        # exact, so channels 0/1 decode each output pixel's source position;
        # the mask must match the original at the nearest-rounded position
        # (rounding ties accept either neighbor).
        h = w = 64
        mask = block_mask(h, w)
        yy, xx = np.mgrid[0:h, 0:w]
        ramp = SampleRecord(id="ramp", mask=mask,
                            image=np.stack([yy / h, xx / w, np.full((h, w), 0.5)], axis=-1))
        geo = AugmentConfig(crop=32, contrast=(1.0, 1.0), brightness=(1.0, 1.0))

        def candidates(pos, limit):
            shifted = pos + 0.5
            lo = np.floor(shifted).astype(int)
            tie = np.abs(shifted - lo) < 1e-9
            return (np.clip(lo, 0, limit - 1),
                    np.clip(np.where(tie, lo - 1, lo), 0, limit - 1))

        for seed in range(1000):
            out = augment(ramp, seed=seed, cfg=geo)
            ya, yb = candidates(out.image[:, :, 0] * h, h)
            xa, xb = candidates(out.image[:, :, 1] * w, w)
            ok = np.zeros(out.mask.shape, dtype=bool)
            for cy in (ya, yb):
                for cx in (xa, xb):
                    ok |= out.mask == mask[cy, cx]
            assert ok.all(), f"seed {seed}: image/mask geometry diverged"
        return ("deterministic per seed; output always crop x crop; "
                "coordinate-ramp lockstep held over 1000 seeds")

    check("augmentation properties", 60.0, body)


def test_closed_loop_integration(tmp_path):
    def body():
        root = str(tmp_path)
        svc = Service(root, model_cfg=SERVICE_CFG, seed=0)
        client = TestClient(create_app(svc))
        recs = synth_generate(8, seed=0, size=32)
        images = [png_b64(r.image) for r in recs]

        # terminal simulator: 20 images across four terminals
        pids = []
        for i in range(20):
            r = client.post(f"/v1/terminals/terminal-{i % 4:02d}/images",
                            json={"image": images[i % len(images)]})
            assert r.status_code == 200, f"ingest {i}: {r.text}"
            pids.append(r.json()["prediction_id"])
        assert len(set(pids)) == 20, "prediction ids not unique"

        # five unqualified verdicts enroll corrections
        for i in range(5):
            r = client.post(
                f"/v1/predictions/{pids[i]}/verdict",
                json={"decision": "unqualified",
                      "corrected_mask": encode_mask_payload(recs[i % len(recs)].mask)})
            assert r.status_code == 200, f"verdict {i}: {r.text}"
        assert client.get("/v1/dataset/stats").json()["size"] == 5

        # parallel training runs to completion under a live ingest stream
        old = client.get("/v1/model/info").json()["digest"]
        r = client.post("/v1/parallel/train", json={"epochs": 40, "lr": 1e-2, "seed": 1})
        assert r.status_code == 202, r.text
        ingests = ok = 0
        while True:
            status = client.get("/v1/parallel/status").json()
            if status["state"] != "training":
                break
            resp = client.post("/v1/terminals/live/images",
                               json={"image": images[ingests % len(images)]})
            ingests += 1
            ok += int(resp.status_code == 200)
        assert status["state"] == "completed", f"training ended as {status}"
        assert ingests >= 3, f"only {ingests} ingests overlapped training"
        assert ok == ingests, f"{ingests - ok} of {ingests} ingests failed during training"
        new = status["digest"]
        assert new != old

        # swap must be atomic under 100 racing inference requests
        results = []
        res_lock = threading.Lock()
        go = threading.Event()

        def worker(k):
            go.wait()
            for j in range(10):
                resp = client.post(f"/v1/terminals/race-{k}/images",
                                   json={"image": images[(k + j) % len(images)]})
                with res_lock:
                    results.append((resp.status_code, resp.json().get("digest")))

        threads = [threading.Thread(target=worker, args=(k,)) for k in range(10)]
        for t in threads:
            t.start()
        go.set()
        while True:
            with res_lock:
                if len(results) >= 20:
                    break
            time.sleep(0.005)
        r = client.post("/v1/weights/swap")
        assert r.status_code == 200, r.text
        for t in threads:
            t.join()
        assert len(results) == 100
        assert all(code == 200 for code, _ in results), "a racing request failed"
        seen = {digest for _, digest in results}
        assert seen <= {old, new}, f"unexpected digests {seen - {old, new}}"
        after = client.post("/v1/terminals/after/images",
                            json={"image": images[0]}).json()["digest"]
        assert after == new, "post-swap request served the old weights"

        # post-restart state matches the durable log
        expected_stats = client.get("/v1/dataset/stats").json()
        expected_pending = [p["id"] for p in client.get("/v1/predictions").json()["items"]]
        svc.close()
        revived = Service(root)
        try:
            assert revived.model_info()["digest"] == new
            assert revived.dataset_stats() == expected_stats
            assert revived.training_status()["state"] == "idle"
            revived_pending = [p["id"] for p in revived.list_predictions()["items"]]
            assert revived_pending == expected_pending
        finally:
            revived.close()
        return (f"20 streamed, 5 enrolled, {ok}/{ingests} ingests succeeded during "
                f"training, 100 racing digests all in {{old, new}}, restart state "
                f"matches the log")

    check("closed-loop integration", 600.0, body)


def test_dataset_growth_counter(tmp_path):
    def body():
        svc = Service(str(tmp_path), model_cfg=SERVICE_CFG, seed=0)
        client = TestClient(create_app(svc))
        try:
            for k, rec in enumerate(synth_generate(6, seed=2, size=32), start=1):
                pid = client.post(
                    "/v1/terminals/t/images",
                    json={"image": png_b64(rec.image)}).json()["prediction_id"]
                r = client.post(
                    f"/v1/predictions/{pid}/verdict",
                    json={"decision": "unqualified",
                          "corrected_mask": encode_mask_payload(rec.mask)})
                assert r.status_code == 200, r.text
                size = client.get("/v1/dataset/stats").json()["size"]
                assert size == k, f"after {k} enrollments stats report {size}"
        finally:
            svc.close()
        return "dataset size equals k exactly after each of k=1..6 enrollments"

    check("dataset-growth counter", 60.0, body)
