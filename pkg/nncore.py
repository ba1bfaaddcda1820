"""
噪声预测网络：全连接 MLP、手写反向传播、有限差分校验与 AdamW 优化器

输入为 [x_t, 时间步正弦编码(2F), prompt 嵌入(E)] 的拼接，隐藏层 tanh，输出层恒等。
参数顺序（检查点同此顺序）：W0, b0, W1, b1, ..., W_last, b_last, embed。
"""

import logging
import struct
from dataclasses import dataclass

import numpy as np

from config import Config
from errors import DimensionMismatch, FormatError, NonFiniteGradient
from utils import keyed_rng

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b'CRV3'
CHECKPOINT_VERSION = 1
FD_ATOL = 1e-6
TIMESTEP_BASE = 10000.0


@dataclass(frozen=True, eq=False)
class DenoiserParams:
    """网络参数；梯度也使用同一结构"""
    weights: tuple
    biases: tuple
    embed: np.ndarray  # (num_prompts + 1, E)，最后一行是无条件（null）嵌入
    freq_count: int = Config.FREQ_COUNT

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise DimensionMismatch('权重与偏置层数不一致')
        for w, b in zip(self.weights, self.biases):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise DimensionMismatch(f'层形状不一致: W{w.shape} b{b.shape}')
        for w_prev, w_next in zip(self.weights, self.weights[1:]):
            if w_prev.shape[1] != w_next.shape[0]:
                raise DimensionMismatch(f'相邻层维度不一致: {w_prev.shape} -> {w_next.shape}')
        if self.embed.ndim != 2 or self.embed.shape[0] < 2:
            raise DimensionMismatch(f'嵌入表形状不合法: {self.embed.shape}')
        if self.input_dim != self.data_dim + 2 * self.freq_count + self.embed_dim:
            raise DimensionMismatch('输入层维度应为 D + 2F + E')

    @property
    def data_dim(self):
        return self.weights[-1].shape[1]

    @property
    def input_dim(self):
        return self.weights[0].shape[0]

    @property
    def embed_dim(self):
        return self.embed.shape[1]

    @property
    def num_prompts(self):
        return self.embed.shape[0] - 1

    @property
    def null_prompt(self):
        return self.embed.shape[0] - 1

    @property
    def hidden(self):
        return tuple(w.shape[1] for w in self.weights[:-1])

    @property
    def frozen(self):
        return not self.embed.flags.writeable

    def tensors(self):
        """按固定顺序列出全部参数张量"""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        out.append(self.embed)
        return out

    @classmethod
    def from_tensors(cls, tensors, freq_count):
        n_layers = (len(tensors) - 1) // 2
        return cls(tuple(tensors[0:2 * n_layers:2]), tuple(tensors[1:2 * n_layers:2]),
                   tensors[-1], freq_count)

    def map(self, fn, *others):
        """逐张量变换，返回新的参数对象"""
        columns = zip(self.tensors(), *(o.tensors() for o in others))
        return DenoiserParams.from_tensors([fn(*col) for col in columns], self.freq_count)

    def copy(self):
        return self.map(lambda a: np.array(a, dtype=np.float64))

    def freeze(self):
        """只读副本，用作 θ_base"""
        def _readonly(a):
            out = np.array(a, dtype=np.float64)
            out.flags.writeable = False
            return out
        return self.map(_readonly)

    def zeros_like(self):
        return self.map(np.zeros_like)

    def all_finite(self):
        return all(np.all(np.isfinite(a)) for a in self.tensors())

    def global_norm(self):
        return float(np.sqrt(sum(float(np.sum(a * a)) for a in self.tensors())))

    def size(self):
        return sum(a.size for a in self.tensors())


def add(a, b):
    return a.map(np.add, b)


def scale(a, factor):
    return a.map(lambda x: x * factor)


def init_params(data_dim, num_prompts, hidden=Config.HIDDEN, embed_dim=Config.EMBED_DIM,
                freq_count=Config.FREQ_COUNT, seed=0):
    """
    初始化网络参数

    Args:
        data_dim: D，拼接视角图展平后的维度 (2·view_res)²
        num_prompts: prompt 数量，嵌入表多一行 null
        hidden: 隐藏层宽度；空元组表示单层线性模型
        embed_dim: E
        freq_count: F
        seed: 随机种子

    Returns:
        DenoiserParams
    """
    rng = keyed_rng(seed, 7)
    sizes = [data_dim + 2 * freq_count + embed_dim] + list(hidden) + [data_dim]
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes, sizes[1:]):
        weights.append(rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    embed = rng.normal(0.0, 1.0, size=(num_prompts + 1, embed_dim))
    return DenoiserParams(tuple(weights), tuple(biases), embed, freq_count)


def timestep_embedding(t, freq_count):
    """正弦时间步编码，返回 (B, 2F)"""
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    freqs = np.exp(-np.log(TIMESTEP_BASE) * np.arange(freq_count) / freq_count)
    angles = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


def _as_batch(params, x_t, t, c):
    x = np.asarray(x_t, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != params.data_dim:
        raise DimensionMismatch(f'x_t 维度应为 {params.data_dim}，实际 {x.shape}')
    batch = x.shape[0]
    t = np.broadcast_to(np.asarray(t, dtype=np.int64), (batch,))
    if c is None:
        c = params.null_prompt
    c = np.broadcast_to(np.asarray(c, dtype=np.int64), (batch,))
    if np.any(c < 0) or np.any(c > params.null_prompt):
        raise DimensionMismatch(f'prompt 编号超出范围 [0, {params.null_prompt}]')
    return x, t, c


def forward_batch(params, x_t, t, c):
    """
    批量前向

    Args:
        params: DenoiserParams
        x_t: (B, D) 或 (D,)
        t: 时间步（标量或 (B,)）
        c: prompt 编号（标量、(B,) 或 None 表示 null）

    Returns:
        (eps_hat (B, D), cache)
    """
    x, t, c = _as_batch(params, x_t, t, c)
    h = np.concatenate([x, timestep_embedding(t, params.freq_count), params.embed[c]], axis=1)
    activations = [h]
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = h @ w + b
        h = z if i == last else np.tanh(z)
        activations.append(h)
    return h, (activations, c)


def backward_batch(params, cache, upstream):
    """反向传播 ⟨eps_hat, upstream⟩，对批内样本求和"""
    activations, c = cache
    g = np.asarray(upstream, dtype=np.float64)
    if g.ndim == 1:
        g = g[None, :]
    if g.shape != activations[-1].shape:
        raise DimensionMismatch(f'上游梯度形状应为 {activations[-1].shape}，实际 {g.shape}')

    n_layers = len(params.weights)
    grad_w = [None] * n_layers
    grad_b = [None] * n_layers
    for i in range(n_layers - 1, -1, -1):
        if i != n_layers - 1:
            g = g * (1.0 - activations[i + 1] ** 2)  # tanh'
        grad_w[i] = activations[i].T @ g
        grad_b[i] = g.sum(axis=0)
        g = g @ params.weights[i].T

    grad_embed = np.zeros_like(params.embed)
    offset = params.data_dim + 2 * params.freq_count
    np.add.at(grad_embed, c, g[:, offset:])
    return DenoiserParams(tuple(grad_w), tuple(grad_b), grad_embed, params.freq_count)


def forward(params, x_t, t, c):
    """单样本前向，返回 eps_hat (D,)"""
    eps, _ = forward_batch(params, x_t, t, c)
    return eps[0]


def backward(params, x_t, t, c, upstream):
    """单样本反向，返回对全部参数的梯度"""
    _, cache = forward_batch(params, x_t, t, c)
    return backward_batch(params, cache, upstream)


def fd_check(params, x_t, t, c, n_samples=200, h=1e-5, seed=0, grad_fn=None):
    """
    用中心差分校验反向传播

    对 ε̂ 的随机投影 ⟨ε̂, u⟩ 求梯度，随机抽取 n_samples 个标量参数比较。

    Args:
        grad_fn: 被校验的梯度函数，签名同 backward；默认使用 backward

    Returns:
        最大相对误差 |a-b| / max(|a|, |b|, 1e-6)
    """
    if h <= 0:
        raise ValueError(f'差分步长必须为正: {h}')
    if n_samples <= 0:
        return 0.0
    grad_fn = grad_fn or backward
    rng = keyed_rng(seed, 11)
    u = rng.normal(size=params.data_dim) / np.sqrt(params.data_dim)
    analytic = grad_fn(params, x_t, t, c, u).tensors()

    work = params.copy()
    tensors = work.tensors()
    worst = 0.0
    for _ in range(n_samples):
        k = int(rng.integers(len(tensors)))
        flat = tensors[k].reshape(-1)
        j = int(rng.integers(flat.size))
        original = flat[j]
        flat[j] = original + h
        f_plus = float(forward(work, x_t, t, c) @ u)
        flat[j] = original - h
        f_minus = float(forward(work, x_t, t, c) @ u)
        flat[j] = original
        numeric = (f_plus - f_minus) / (2.0 * h)
        exact = float(analytic[k].reshape(-1)[j])
        err = abs(numeric - exact) / max(abs(numeric), abs(exact), FD_ATOL)
        worst = max(worst, err)
    return worst


# ── AdamW ─────────────────────────────────────────────────────────────────

@dataclass(frozen=True, eq=False)
class OptState:
    m: tuple
    v: tuple
    step: int = 0
    lr: float = Config.LR
    beta1: float = Config.BETA1
    beta2: float = Config.BETA2
    eps: float = Config.EPS
    weight_decay: float = Config.WEIGHT_DECAY


def init_opt_state(params, lr=Config.LR, beta1=Config.BETA1, beta2=Config.BETA2,
                   eps=Config.EPS, weight_decay=Config.WEIGHT_DECAY):
    zeros = tuple(np.zeros_like(a) for a in params.tensors())
    return OptState(zeros, zeros, 0, lr, beta1, beta2, eps, weight_decay)


def opt_step(params, grads, state):
    """
    AdamW 一步（解耦权重衰减），不修改输入

    Returns:
        (新参数, 新状态)

    Raises:
        DimensionMismatch: 梯度或动量形状与参数不一致
        NonFiniteGradient: 梯度含 NaN/Inf
    """
    p_list, g_list = params.tensors(), grads.tensors()
    if len(p_list) != len(g_list) or len(p_list) != len(state.m):
        raise DimensionMismatch('参数、梯度与优化器状态的张量数量不一致')
    for p, g, m in zip(p_list, g_list, state.m):
        if p.shape != g.shape or p.shape != m.shape:
            raise DimensionMismatch(f'形状不一致: 参数 {p.shape}，梯度 {g.shape}，动量 {m.shape}')
    if not grads.all_finite():
        raise NonFiniteGradient('梯度包含非有限值')

    step = state.step + 1
    bc1 = 1.0 - state.beta1 ** step
    bc2 = 1.0 - state.beta2 ** step
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(p_list, g_list, state.m, state.v):
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        m_hat = m / bc1
        v_hat = v / bc2
        new_p.append(p - state.lr * (m_hat / (np.sqrt(v_hat) + state.eps) + state.weight_decay * p))
        new_m.append(m)
        new_v.append(v)
    new_state = OptState(tuple(new_m), tuple(new_v), step, state.lr, state.beta1, state.beta2,
                         state.eps, state.weight_decay)
    return DenoiserParams.from_tensors(new_p, params.freq_count), new_state


# ── 检查点 ────────────────────────────────────────────────────────────────

def params_to_bytes(params):
    """magic "CRV3"、版本、层维度、嵌入表形状、F，然后按参数顺序写 float64 小端"""
    sizes = [params.input_dim] + list(params.hidden) + [params.data_dim]
    header = CHECKPOINT_MAGIC + struct.pack('<II', CHECKPOINT_VERSION, len(sizes))
    header += struct.pack(f'<{len(sizes)}I', *sizes)
    header += struct.pack('<III', params.embed.shape[0], params.embed_dim, params.freq_count)
    body = b''.join(np.ascontiguousarray(a, dtype='<f8').tobytes() for a in params.tensors())
    return header + body


def params_from_bytes(payload):
    if payload[:4] != CHECKPOINT_MAGIC:
        raise FormatError('检查点 magic 不符')
    try:
        version, n_sizes = struct.unpack_from('<II', payload, 4)
        if version != CHECKPOINT_VERSION:
            raise FormatError(f'不支持的检查点版本: {version}')
        offset = 12
        sizes = struct.unpack_from(f'<{n_sizes}I', payload, offset)
        offset += 4 * n_sizes
        rows, embed_dim, freq_count = struct.unpack_from('<III', payload, offset)
        offset += 12
    except struct.error as e:
        raise FormatError(f'检查点头部损坏: {e}')

    shapes = []
    for fan_in, fan_out in zip(sizes, sizes[1:]):
        shapes.extend([(fan_in, fan_out), (fan_out,)])
    shapes.append((rows, embed_dim))
    expected = offset + 8 * sum(int(np.prod(s)) for s in shapes)
    if len(payload) != expected:
        raise FormatError(f'检查点长度不符: 期望 {expected} 字节，实际 {len(payload)}')

    tensors = []
    for shape in shapes:
        count = int(np.prod(shape))
        arr = np.frombuffer(payload, dtype='<f8', count=count, offset=offset).astype(np.float64)
        tensors.append(arr.reshape(shape))
        offset += 8 * count
    return DenoiserParams.from_tensors(tensors, freq_count)


def save_checkpoint(path, params):
    with open(path, 'wb') as f:
        f.write(params_to_bytes(params))
    logger.debug(f"检查点已保存: {path}")
    return path


def load_checkpoint(path):
    with open(path, 'rb') as f:
        return params_from_bytes(f.read())
