import numpy as np

from qdeploy.autodiff import TrainMode, backward, forward
from qdeploy.engine import ConvParams, FCParams
from qdeploy.plan import build_plan
from qdeploy.quant import QFormat, QTensor
from qdeploy.trainable import gen_trainable


def calibrated_graph(manifest, seed=0, n=64, preproc=None):
    """Generated graph whose activation trackers have seen one batch of random images."""
    plan = build_plan(manifest, preproc=preproc)
    g = gen_trainable(plan, seed)
    rng = np.random.default_rng(seed + 100)
    shape = (n,) + tuple(manifest.input.shape)
    if manifest.input.dtype == "int8":
        x = rng.integers(-128, 128, shape).astype(np.int8)
    else:
        x = rng.integers(0, 256, shape).astype(np.uint8)
    forward(g, {"image": x}, TrainMode.QAT_TRAIN, upto=g.outputs["logits"])
    g.freeze()
    return g


def q(data, frac):
    return QTensor(np.asarray(data), QFormat(8, frac))


def conv_params(wt, b, bias_shift, out_shift, stride=1, pad=0, fi=7, fw=7):
    # bias format implied by the shift: frac_bias = frac_in + frac_wt - bias_shift
    return ConvParams(q(wt, fw), q(b, fi + fw - bias_shift), bias_shift, out_shift, stride, pad)


def fc_params(w, b, bias_shift, out_shift, fi=7, fw=7):
    return FCParams(q(w, fw), q(b, fi + fw - bias_shift), bias_shift, out_shift)


def rel_err(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)


def numeric_grads(graph, feeds, eps=1e-3, mode=TrainMode.FP32):
    out = {}
    for name, p in graph.params.items():
        g = np.zeros_like(p)
        it = np.nditer(p, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = p[i]
            p[i] = old + eps
            up = float(forward(graph, feeds, mode, dtype=np.float64)["loss"])
            p[i] = old - eps
            down = float(forward(graph, feeds, mode, dtype=np.float64)["loss"])
            p[i] = old
            g[i] = (up - down) / (2 * eps)
        out[name] = g
    return out


def check_grads(graph, feeds, mode=TrainMode.FP32):
    # keep parameters in float64 so the finite differences are not limited by fp32 storage
    for k in graph.params:
        graph.params[k] = graph.params[k].astype(np.float64)
    forward(graph, feeds, mode, dtype=np.float64)
    analytic = backward(graph)
    numeric = numeric_grads(graph, feeds, mode=mode)
    for k in analytic:
        assert rel_err(analytic[k], numeric[k]) < 1e-3, k
    return analytic


# criterion number -> (passed, detail); printed in the terminal summary
ACCEPTANCE: dict = {}


def record(criterion: int, passed: bool, detail: str) -> bool:
    ACCEPTANCE[criterion] = (bool(passed), detail)
    return bool(passed)
