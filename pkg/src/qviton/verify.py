"""Verification harness: finite-difference gradient checks and independent
forward references (naive loops, dense-matrix circuit evolution).

Everything here recomputes results along a second path on purpose; none of
it may call back into the implementation it is checking beyond the public
forward API.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

from . import nn, quantum
from . import tensor as T
from .model import HybridModel, ModelConfig
from .quantum import CircuitSpec
from .quanv import QuanvConfig
from .tensor import Tensor
from .vit import ViTConfig


@dataclass
class CheckResult:
    name: str
    error: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.error <= self.tol

    def line(self) -> str:
        status = "pass" if self.passed else "FAIL"
        return f"[{status}] {self.name}: max err {self.error:.3e} (tol {self.tol:.0e})"


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max |a - n| scaled by the dominant gradient magnitude (or 1)."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(1.0, float(np.max(np.abs(analytic), initial=0.0)),
                float(np.max(np.abs(numeric), initial=0.0)))
    return float(np.max(np.abs(analytic - numeric), initial=0.0)) / scale


def gradcheck(loss_fn: Callable[[], Tensor], params: Iterable[Tensor],
              h: float = 1e-5, max_coords: int | None = None,
              rng: np.random.Generator | None = None) -> float:
    """Compare tape gradients against central finite differences.

    loss_fn must rebuild the scalar loss from the params' current data;
    max_coords caps the probed coordinates per tensor (sampled with rng).
    """
    params = list(params)
    for t in params:
        t.grad = None
    loss_fn().backward()
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data)
                for t in params]

    a_vals, n_vals = [], []
    with T.no_grad():
        for t, ag in zip(params, analytic):
            flat = t.data.reshape(-1)
            coords = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                coords = rng.choice(flat.size, size=max_coords, replace=False)
            for i in coords:
                orig = flat[i]
                flat[i] = orig + h
                up = loss_fn().item()
                flat[i] = orig - h
                down = loss_fn().item()
                flat[i] = orig
                n_vals.append((up - down) / (2.0 * h))
                a_vals.append(ag.reshape(-1)[i])
    return rel_error(np.array(a_vals), np.array(n_vals))


# -- independent forward references -------------------------------------------


def naive_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    m, k = a.shape
    k2, n = b.shape
    out = np.zeros((m, n), dtype=np.float64)
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for p in range(k):
                acc += float(a[i, p]) * float(b[p, j])
            out[i, j] = acc
    return out


def naive_conv2d(x: np.ndarray, w: np.ndarray, bias: np.ndarray | None = None,
                 stride: int = 1, padding: int = 0) -> np.ndarray:
    b, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((b, f, oh, ow), dtype=np.float64)
    for bi in range(b):
        for fi in range(f):
            for i in range(oh):
                for j in range(ow):
                    window = xp[bi, :, i * stride:i * stride + kh,
                                j * stride:j * stride + kw]
                    out[bi, fi, i, j] = float((window * w[fi]).sum())
            if bias is not None:
                out[bi, fi] += bias[fi]
    return out


def naive_attention(x: np.ndarray, wq, bq, wk, bk, wv, bv, wo, bo,
                    n_heads: int) -> np.ndarray:
    """Per-head loop reference for one (T, D) token matrix."""
    t, d = x.shape
    dh = d // n_heads
    q, k, v = x @ wq + bq, x @ wk + bk, x @ wv + bv
    heads = []
    for h in range(n_heads):
        sl = slice(h * dh, (h + 1) * dh)
        scores = q[:, sl] @ k[:, sl].T / math.sqrt(dh)
        scores = scores - scores.max(axis=1, keepdims=True)
        weights = np.exp(scores)
        weights /= weights.sum(axis=1, keepdims=True)
        heads.append(weights @ v[:, sl])
    return np.concatenate(heads, axis=1) @ wo + bo


def dense_ry(theta: float) -> np.ndarray:
    c, s = math.cos(theta / 2.0), math.sin(theta / 2.0)
    return np.array([[c, -s], [s, c]], dtype=np.complex128)


def embed_gate(n: int, qubit: int, gate: np.ndarray) -> np.ndarray:
    """Kronecker-embed a 1-qubit gate; qubit 0 is the first kron factor."""
    out = np.array([[1.0 + 0.0j]])
    for q in range(n):
        out = np.kron(out, gate if q == qubit else np.eye(2, dtype=np.complex128))
    return out


def dense_cnot(n: int, control: int, target: int) -> np.ndarray:
    dim = 2**n
    mat = np.zeros((dim, dim), dtype=np.complex128)
    for col in range(dim):
        row = col
        if (col >> (n - 1 - control)) & 1:
            row = col ^ (1 << (n - 1 - target))
        mat[row, col] = 1.0
    return mat


def run_circuit_dense(spec: CircuitSpec, angles: np.ndarray) -> np.ndarray:
    """Full 2^n x 2^n matrix-product evolution of |0..0>."""
    n = spec.n_qubits
    u = np.eye(2**n, dtype=np.complex128)
    for q in range(n):
        u = embed_gate(n, q, dense_ry(angles[q])) @ u
    for layer in range(spec.n_var_layers):
        for q in range(n):
            u = embed_gate(n, q, dense_ry(spec.theta[layer * n + q])) @ u
        for control, target in spec.ring():
            u = dense_cnot(n, control, target) @ u
    psi0 = np.zeros(2**n, dtype=np.complex128)
    psi0[0] = 1.0
    return u @ psi0


def dense_expectation_z(amps: np.ndarray, n: int, qubit: int) -> float:
    idx = np.arange(amps.shape[0])
    signs = 1.0 - 2.0 * ((idx >> (n - 1 - qubit)) & 1)
    return float((np.abs(amps) ** 2 * signs).sum())


# -- check suites ---------------------------------------------------------------


def _random_circuit(rng: np.random.Generator, n_qubits: int = 4,
                    n_var_layers: int = 2) -> tuple[CircuitSpec, np.ndarray]:
    spec = CircuitSpec(
        n_qubits=n_qubits, n_var_layers=n_var_layers,
        theta=rng.uniform(-np.pi, np.pi, size=n_qubits * n_var_layers))
    angles = rng.uniform(0.0, np.pi, size=n_qubits)
    return spec, angles


def check_numerics() -> list[CheckResult]:
    rng = np.random.default_rng(2024)
    results = []

    a = Tensor(rng.normal(size=(5, 4)), requires_grad=True, dtype=np.float64)
    b = Tensor(rng.normal(size=(4, 3)), requires_grad=True, dtype=np.float64)
    results.append(CheckResult(
        "matmul forward vs naive loop",
        float(np.abs(T.matmul(a, b).data - naive_matmul(a.data, b.data)).max()),
        1e-12))
    results.append(CheckResult(
        "matmul gradcheck",
        gradcheck(lambda: T.matmul(a, b).sum(), [a, b]), 1e-6))

    x = Tensor(rng.normal(size=(2, 3, 7, 7)), requires_grad=True, dtype=np.float64)
    w = Tensor(rng.normal(size=(4, 3, 3, 3)), requires_grad=True, dtype=np.float64)
    bias = Tensor(rng.normal(size=4), requires_grad=True, dtype=np.float64)
    results.append(CheckResult(
        "conv2d forward vs naive loop",
        float(np.abs(
            nn.conv2d(x, w, bias, stride=2, padding=1).data
            - naive_conv2d(x.data, w.data, bias.data, stride=2, padding=1)
        ).max()),
        1e-12))
    results.append(CheckResult(
        "conv2d gradcheck",
        gradcheck(lambda: (nn.conv2d(x, w, bias, stride=2, padding=1) ** 2).sum(),
                  [x, w, bias]),
        1e-6))

    z = Tensor(rng.normal(size=(4, 6)), requires_grad=True, dtype=np.float64)
    gamma = Tensor(rng.normal(size=6), requires_grad=True, dtype=np.float64)
    beta = Tensor(rng.normal(size=6), requires_grad=True, dtype=np.float64)
    results.append(CheckResult(
        "layer_norm gradcheck",
        gradcheck(lambda: (nn.layer_norm(z, gamma, beta) ** 2).sum(),
                  [z, gamma, beta]),
        1e-6))

    for name, fn in (("gelu", T.gelu), ("sigmoid", T.sigmoid), ("tanh", T.tanh)):
        v = Tensor(rng.normal(size=12), requires_grad=True, dtype=np.float64)
        results.append(CheckResult(
            f"{name} gradcheck",
            gradcheck(lambda fn=fn, v=v: (fn(v) * fn(v)).sum(), [v]), 1e-6))

    logits = Tensor(rng.normal(size=(5, 3)), requires_grad=True, dtype=np.float64)
    labels = rng.integers(0, 3, size=5)
    results.append(CheckResult(
        "softmax_cross_entropy gradcheck",
        gradcheck(lambda: T.softmax_cross_entropy(logits, labels), [logits]),
        1e-6))
    rows = T.softmax(Tensor(rng.normal(size=(20, 9)) * 10.0)).data.sum(axis=1)
    results.append(CheckResult(
        "softmax rows sum to one", float(np.abs(rows - 1.0).max()), 1e-9))

    sm = Tensor(rng.normal(size=(3, 5)), requires_grad=True, dtype=np.float64)
    results.append(CheckResult(
        "softmax gradcheck",
        gradcheck(lambda: (T.softmax(sm) ** 2).sum(), [sm]), 1e-6))

    p = Tensor(rng.normal(size=(2, 3, 6, 6)), requires_grad=True, dtype=np.float64)
    results.append(CheckResult(
        "adaptive_avg_pool2d gradcheck",
        gradcheck(lambda: (nn.adaptive_avg_pool2d(p, (4, 4)) ** 2).sum(), [p]),
        1e-6))

    store = T.ParamStore()
    bn = nn.BatchNorm2d(store, "bn", 3, dtype=np.float64)
    xb = Tensor(rng.normal(size=(4, 3, 5, 5)), requires_grad=True, dtype=np.float64)
    results.append(CheckResult(
        "batch_norm2d (train) gradcheck",
        gradcheck(lambda: (bn(xb, train=True) ** 2).sum(),
                  [xb, bn.gamma, bn.beta]),
        1e-6))

    xd = Tensor(rng.normal(size=(4, 4)))
    dropped = T.dropout(xd, 0.4, train=False)
    results.append(CheckResult(
        "dropout eval-mode identity (bitwise)",
        0.0 if dropped.data is xd.data or (dropped.data == xd.data).all() else 1.0,
        0.0))

    cx = Tensor(rng.normal(size=(1, 2, 8, 8)), requires_grad=True, dtype=np.float64)
    cw = Tensor(rng.normal(size=(3, 2, 3, 3)) * 0.5, requires_grad=True,
                dtype=np.float64)
    cg = Tensor(np.ones(3), requires_grad=True, dtype=np.float64)
    cb = Tensor(np.zeros(3), requires_grad=True, dtype=np.float64)

    def composite():
        y = T.gelu(nn.conv2d(cx, cw, stride=1, padding=1))
        y = y.transpose((0, 2, 3, 1))  # normalize over channels
        return (nn.layer_norm(y, cg, cb) ** 2).sum()

    results.append(CheckResult(
        "conv2d -> gelu -> layer_norm composite gradcheck",
        gradcheck(composite, [cx, cw, cg, cb]), 1e-6))
    return results


def check_quantum(n_oracle: int = 100, n_shift: int = 50) -> list[CheckResult]:
    rng = np.random.default_rng(7)
    results = []

    worst = 0.0
    for _ in range(n_oracle):
        spec, angles = _random_circuit(rng)
        amps = quantum.run_circuit(spec, angles).amps
        oracle = run_circuit_dense(spec, angles)
        worst = max(worst, float(np.abs(amps - oracle).max()))
    results.append(CheckResult(
        f"statevector vs dense 16x16 oracle ({n_oracle} circuits)", worst, 1e-10))

    h = 1e-4
    worst = 0.0
    for _ in range(n_shift):
        spec, angles = _random_circuit(rng)
        d_in, d_th = quantum.parameter_shift_grad(spec, angles)
        fd_in = np.zeros_like(d_in)
        for q in range(spec.n_qubits):
            up, down = angles.copy(), angles.copy()
            up[q] += h
            down[q] -= h
            fd_in[q] = (quantum.circuit_expectation(spec, up)
                        - quantum.circuit_expectation(spec, down)) / (2 * h)
        fd_th = np.zeros_like(d_th)
        for k in range(spec.theta.size):
            up, down = spec.theta.copy(), spec.theta.copy()
            up[k] += h
            down[k] -= h
            fd_th[k] = (quantum.circuit_expectation(spec.with_theta(up), angles)
                        - quantum.circuit_expectation(spec.with_theta(down),
                                                      angles)) / (2 * h)
        worst = max(worst,
                    float(np.abs(d_in - fd_in).max()),
                    float(np.abs(d_th - fd_th).max()))
    results.append(CheckResult(
        f"parameter-shift vs finite differences ({n_shift} circuits)", worst, 1e-5))

    one_qubit = CircuitSpec(n_qubits=1, n_var_layers=0, theta=np.zeros(0))
    worst = 0.0
    for theta in np.linspace(-np.pi, np.pi, 17):
        grad, _ = quantum.parameter_shift_grad(one_qubit, [theta])
        worst = max(worst, abs(grad[0] - (-math.sin(theta))))
    results.append(CheckResult(
        "1-qubit shift rule vs -sin(theta)", worst, 1e-12))

    state = quantum.StateVector.zero(4)
    gate_rng = np.random.default_rng(11)
    for _ in range(1000):
        if gate_rng.random() < 0.7:
            state = quantum.apply_ry(state, int(gate_rng.integers(0, 4)),
                                     float(gate_rng.uniform(-np.pi, np.pi)))
        else:
            c, t = gate_rng.choice(4, size=2, replace=False)
            state = quantum.apply_cnot(state, int(c), int(t))
    results.append(CheckResult(
        "norm preserved over 1000 gates", abs(state.norm() - 1.0), 1e-12))
    return results


def _toy_quanv(dtype, use_circuit: bool):
    from .quanv import QuanvPathway

    store = T.ParamStore()
    rng = np.random.default_rng(5)
    pathway = QuanvPathway(store, "quanv",
                           QuanvConfig(use_circuit=use_circuit), rng, dtype)
    return store, pathway


def check_quanv() -> list[CheckResult]:
    rng = np.random.default_rng(13)
    results = []

    store, pathway = _toy_quanv(np.float64, use_circuit=True)
    x = Tensor(rng.normal(size=(1, 3, 24, 24)), dtype=np.float64)
    labels = np.array([1])

    def loss_fn():
        feats = pathway.forward(x, train=False)
        logits = T.concat([feats.sum(keepdims=True).reshape((1, 1)),
                           (feats * feats).sum(keepdims=True).reshape((1, 1))],
                          axis=1)
        return T.softmax_cross_entropy(logits, labels)

    probe = [pathway.mixer.w, pathway.mixer.b, pathway.theta,
             pathway.restore.w, pathway.conv1.w, pathway.bn2.gamma]
    results.append(CheckResult(
        "quanv end-to-end gradcheck across circuit boundary",
        gradcheck(loss_fn, probe, max_coords=4, rng=rng), 1e-4))

    store_c, pathway_c = _toy_quanv(np.float64, use_circuit=False)

    def loss_const():
        feats = pathway_c.forward(x, train=False)
        return (feats * feats).sum()

    probe_c = [pathway_c.restore.w, pathway_c.restore.b]
    results.append(CheckResult(
        "quanv with constant circuit (classical pipeline) gradcheck",
        gradcheck(loss_const, probe_c, max_coords=8, rng=rng), 1e-6))

    grid = rng.normal(size=(2, 1, 8, 8))
    from .quanv import patch_encode
    angles = patch_encode(Tensor(grid)).data
    rebuilt = np.zeros_like(grid)
    for r in range(4):
        for c in range(4):
            patch = angles[:, r * 4 + c].reshape(2, 2, 2)
            rebuilt[:, 0, 2 * r:2 * r + 2, 2 * c:2 * c + 2] = patch
    from scipy.special import expit
    expected = np.pi * expit(grid)
    results.append(CheckResult(
        "patch extraction bijection (reassembly)",
        float(np.abs(rebuilt - expected).max()), 1e-12))

    qmap = pathway.quantum_map(Tensor(rng.normal(size=(3, 1, 8, 8)) * 5.0,
                                      dtype=np.float64))
    results.append(CheckResult(
        "quantum map bounded in [-1, 1]",
        max(0.0, float(np.abs(qmap.data).max()) - 1.0), 1e-12))
    return results


def check_vit() -> list[CheckResult]:
    from .vit import EncoderBlock

    rng = np.random.default_rng(17)
    results = []
    cfg = ViTConfig(d_model=16, n_layers=1, n_heads=2, d_mlp=32,
                    patch_size=14, image_size=28)
    store = T.ParamStore()
    block = EncoderBlock(store, "block", cfg, np.random.default_rng(3),
                         dtype=np.float64)
    # zero-init residual projections would hide gradient bugs; randomize
    block.wo.w.data[...] = rng.normal(size=block.wo.w.shape) * 0.3
    block.fc2.w.data[...] = rng.normal(size=block.fc2.w.shape) * 0.3

    tokens = rng.normal(size=(5, 16))
    out = block.attention(Tensor(tokens[None], dtype=np.float64)).data[0]
    oracle = naive_attention(
        tokens, block.wq.w.data, block.wq.b.data, block.wk.w.data,
        block.wk.b.data, block.wv.w.data, block.wv.b.data,
        block.wo.w.data, block.wo.b.data, cfg.n_heads)
    results.append(CheckResult(
        "attention vs naive per-head loop", float(np.abs(out - oracle).max()),
        1e-10))

    x = Tensor(rng.normal(size=(1, 5, 16)), requires_grad=True, dtype=np.float64)
    params = [x, block.wq.w, block.wv.w, block.wo.w, block.fc1.w, block.fc2.w,
              block.ln1.gamma, block.ln2.beta]
    results.append(CheckResult(
        "encoder block gradcheck",
        gradcheck(lambda: (block(x, train=False) ** 2).sum(), params,
                  max_coords=6, rng=rng),
        1e-5))
    return results


def check_model() -> list[CheckResult]:
    from .model import Classifier

    rng = np.random.default_rng(23)
    results = []

    store = T.ParamStore()
    clf = Classifier(store, "clf", 24, (16, 8), (0.5, 0.4), 2,
                     np.random.default_rng(1), dtype=np.float64)
    x = Tensor(rng.normal(size=(3, 24)), requires_grad=True, dtype=np.float64)
    labels = np.array([0, 1, 1])
    results.append(CheckResult(
        "classifier gradcheck (dropout off)",
        gradcheck(lambda: T.softmax_cross_entropy(clf(x, train=False), labels),
                  [x] + store.tensors(), max_coords=6, rng=rng),
        1e-6))

    model = HybridModel(ModelConfig.toy(), seed=3, dtype=np.float64).eval()
    img = Tensor(rng.normal(size=(1, 3, 56, 56)), dtype=np.float64)
    lbl = np.array([1])
    results.append(CheckResult(
        "composed toy hybrid gradcheck (dropout off, double)",
        gradcheck(lambda: T.softmax_cross_entropy(model(img), lbl),
                  model.store.tensors(), max_coords=2,
                  rng=np.random.default_rng(29)),
        1e-5))
    return results


SCOPES = {
    "numerics": check_numerics,
    "quantum": check_quantum,
    "quanv": check_quanv,
    "vit": check_vit,
    "model": check_model,
}


def run_scope(scope: str) -> list[CheckResult]:
    if scope == "all":
        results = []
        for fn in SCOPES.values():
            results.extend(fn())
        return results
    if scope not in SCOPES:
        raise ValueError(f"unknown scope {scope!r}")
    return SCOPES[scope]()
