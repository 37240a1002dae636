"""Seeded, desk-scale experiments on spectrum propagation in conv decoders.

Each ``exp_*`` function is a pure function of its :class:`ExperimentConfig`
(which carries the seed) and returns an :class:`AnalysisReport`: sorted metric
rows, named CSV tables, 8-bit spectrum images and pass/fail trend checks.
Trend claims are checked on means over ``n_seeds`` independently seeded
replicates; replicate ``i`` of run seed ``s`` uses the substream ``(s, i)``.
"""
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .analysis import (
    low_mask,
    magnitude_map_render,
    p_low_ratio,
    som_empirical,
    som_multichannel_analytic,
    upsample_spectrum_predict,
    zero_padding_expected_signal,
    zero_padding_monte_carlo,
)
from .exceptions import ConfigError, ZeroEnergy
from .network import (
    ConvLayer,
    Network,
    UpsampleLayer,
    backprop,
    conv_preactivation,
    init_network,
    mse_loss_and_grad,
    network_forward,
    sgd_step,
)
from .propagation import (
    cascade_spectra,
    compute_transfer_field,
    delta_T_from_layer,
    measure_delta_T,
    predict_delta_T_all,
    propagate_layer_same,
)
from .rng import gaussian, make_rng
from .tensor import cosine_similarity_norm_maps, dft2, idft2

EXPERIMENTS = (
    "verify-forward",
    "verify-backward",
    "depth-som",
    "kernel-size",
    "mean-bias",
    "padding",
    "upsampling",
    "train-demo",
)

VARIANTS = {
    # name: (padding, activation)
    "relu_zero": ("zero_same", "relu"),
    "linear_zero": ("zero_same", "identity"),
    "linear_circular": ("circular", "identity"),
}


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything an experiment needs besides code. ``None`` std means He scaling."""

    experiment: str
    seed: int = 42
    n_seeds: int = 20
    size: int = 32
    in_channels: int = 3
    width: int = 16
    out_channels: Optional[int] = None
    depth: int = 5
    kernel_size: int = 3
    kernel_sizes: Tuple[int, ...] = (1, 3, 5)
    padding: str = "zero_same"
    activation: str = "identity"
    init_mean: float = 0.0
    init_std: Optional[float] = None
    means: Tuple[float, ...] = (0.0, 0.001, 0.01)
    zero_bias: bool = False
    n_images: int = 4
    exponent: float = 1.0
    center_inputs: bool = True
    variants: Tuple[str, ...] = ("relu_zero", "linear_zero", "linear_circular")
    learning_rate: float = 0.01
    epochs: int = 200
    blocks: int = 4
    input_size: int = 4
    analytic_draws: int = 400
    pad_in_size: int = 4
    pad_out_size: int = 6
    pad_draws: int = 10000
    pad_feature_mean: float = 1.0
    pad_feature_std: float = 1.0
    map_every: int = 10
    image_dir: Optional[str] = None

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {self.experiment!r}")
        for name in ("n_seeds", "size", "in_channels", "width", "depth", "kernel_size", "n_images",
                     "blocks", "input_size", "analytic_draws", "pad_in_size", "pad_out_size",
                     "pad_draws", "map_every"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.size > 64:
            raise ConfigError("size must be <= 64 at desk scale")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be >= 0")
        if self.exponent <= 0:
            raise ConfigError("exponent must be > 0")
        if self.init_std is not None and self.init_std < 0:
            raise ConfigError("init_std must be >= 0")
        if self.padding not in ("circular", "zero_same"):
            raise ConfigError(f"padding must be circular or zero_same, got {self.padding!r}")
        if self.activation not in ("identity", "relu"):
            raise ConfigError(f"activation must be identity or relu, got {self.activation!r}")
        if any(k < 1 for k in self.kernel_sizes):
            raise ConfigError("kernel sizes must be >= 1")
        for v in self.variants:
            if v not in VARIANTS:
                raise ConfigError(f"unknown variant {v!r}")
        if self.pad_out_size <= self.pad_in_size:
            raise ConfigError("pad_out_size must exceed pad_in_size")
        object.__setattr__(self, "kernel_sizes", tuple(int(k) for k in self.kernel_sizes))
        object.__setattr__(self, "means", tuple(float(m) for m in self.means))
        object.__setattr__(self, "variants", tuple(self.variants))

    @classmethod
    def defaults(cls, experiment, **overrides):
        """Config with the desk-scale defaults of ``experiment`` and any overrides."""
        if experiment not in DEFAULTS:
            raise ConfigError(f"unknown experiment {experiment!r}")
        kw = dict(DEFAULTS[experiment])
        kw.update({k: v for k, v in overrides.items() if v is not None or k == "init_std"})
        return cls(experiment=experiment, **kw)

    def to_dict(self):
        return asdict(self)


DEFAULTS = {
    "verify-forward": dict(
        n_seeds=1, size=64, depth=10, width=16, kernel_size=3, n_images=8, init_mean=0.01,
        init_std=0.05, exponent=1.5, center_inputs=False,
    ),
    "verify-backward": dict(
        n_seeds=1, size=64, depth=10, width=16, kernel_size=3, n_images=8, init_mean=0.01,
        init_std=0.05, exponent=1.5, center_inputs=False, learning_rate=0.01,
    ),
    "depth-som": dict(
        size=32, depth=20, width=16, kernel_size=3, padding="zero_same", activation="relu",
        init_mean=0.01, init_std=0.1, zero_bias=True,
    ),
    "kernel-size": dict(
        size=32, depth=5, width=16, out_channels=3, padding="zero_same", activation="identity",
        zero_bias=True,
    ),
    "mean-bias": dict(
        size=32, depth=5, width=16, out_channels=3, kernel_size=9, padding="circular",
        activation="identity", init_std=0.01, zero_bias=True,
    ),
    "padding": dict(
        size=32, depth=5, width=16, out_channels=3, kernel_size=7, activation="relu",
        zero_bias=False,
    ),
    "upsampling": dict(
        blocks=4, input_size=4, width=16, kernel_size=3, padding="zero_same", activation="relu",
        init_mean=0.01, init_std=0.1, zero_bias=True, center_inputs=False, n_images=4,
    ),
    "train-demo": dict(
        size=32, width=8, kernel_size=3, padding="zero_same", activation="relu", n_images=4,
        epochs=200, learning_rate=0.1, center_inputs=False,
    ),
}


@dataclass
class AnalysisReport:
    """Metric rows ``(name, index, value)`` plus tables, images and trend checks."""

    experiment: str
    seed: int
    rows: List[Tuple[str, Tuple[int, ...], float]] = field(default_factory=list)
    tables: Dict[str, Tuple[List[str], List[tuple]]] = field(default_factory=dict)
    images: Dict[str, np.ndarray] = field(default_factory=dict)
    checks: Dict[str, bool] = field(default_factory=dict)
    flags: Dict[str, bool] = field(default_factory=dict)
    artifacts: List[str] = field(default_factory=list)

    def add(self, name, index, value):
        if np.isscalar(index):
            index = (int(index),)
        self.rows.append((name, tuple(int(i) for i in index), float(value)))

    def finalize(self):
        self.rows.sort(key=lambda r: (r[0], r[1]))
        return self

    def values(self, name):
        """Values of metric ``name`` in index order."""
        return np.array([v for n, _, v in self.rows if n == name])

    def get(self, name, index):
        if np.isscalar(index):
            index = (int(index),)
        for n, i, v in self.rows:
            if n == name and i == tuple(index):
                return v
        raise KeyError((name, index))

    @property
    def passed(self):
        return all(self.checks.values())


# --------------------------------------------------------------------------
# helpers


def replicate_seed(seed, i):
    """64-bit seed of replicate ``i`` derived from the run seed."""
    ss = np.random.SeedSequence([int(seed) & ((1 << 64) - 1), int(i)])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def _map_parallel(fn, items, jobs):
    items = list(items)
    if jobs is None or jobs <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(fn, items))


def synth_powerlaw_images(count, size, exponent, seed, channels=1):
    """Real images whose spectrum magnitude decays as ``(1 + radius)^-exponent``.

    Phases come from the spectrum of seeded white noise, so conjugate symmetry
    holds by construction. Each image channel is min-max scaled to ``[0, 1]``.
    Returns ``(count, channels, M, N)``.
    """
    if exponent <= 0:
        raise ValueError("exponent must be > 0")
    M, N = (size, size) if np.isscalar(size) else tuple(size)
    rng = make_rng(seed, 0)
    noise = gaussian(rng, (count, channels, M, N))
    spec = dft2(noise)
    ku = np.fft.fftfreq(M) * M
    kv = np.fft.fftfreq(N) * N
    radius = np.sqrt(ku[:, None] ** 2 + kv[None, :] ** 2)
    mag = (1.0 + radius) ** (-float(exponent))
    spec = spec / np.maximum(np.abs(spec), np.finfo(float).tiny) * mag
    imgs = idft2(spec)
    lo = imgs.min(axis=(-2, -1), keepdims=True)
    hi = imgs.max(axis=(-2, -1), keepdims=True)
    return (imgs - lo) / np.where(hi > lo, hi - lo, 1.0)


def _inputs(cfg, channels=None, size=None, shard=0):
    channels = cfg.in_channels if channels is None else channels
    size = cfg.size if size is None else size
    if cfg.image_dir:
        from .io import load_image_dir

        x = load_image_dir(cfg.image_dir, size, channels, cfg.n_images)
    else:
        x = synth_powerlaw_images(cfg.n_images, size, cfg.exponent, replicate_seed(cfg.seed, 10_000 + shard), channels)
    if cfg.center_inputs:
        x = x - x.mean(axis=(-2, -1), keepdims=True)
    return x


def _std(cfg, fan_in, K):
    if cfg.init_std is not None:
        return cfg.init_std
    return float(np.sqrt(2.0 / (fan_in * K * K)))


def build_stack(cfg, seed, K=None, padding=None, activation=None, mean=None, depth=None,
                out_channels=None, std=None):
    """Plain stack of same-size conv layers drawn from ``cfg``'s initialization."""
    K = cfg.kernel_size if K is None else K
    padding = cfg.padding if padding is None else padding
    activation = cfg.activation if activation is None else activation
    mean = cfg.init_mean if mean is None else mean
    depth = cfg.depth if depth is None else depth
    last = cfg.out_channels if out_channels is None else out_channels
    layers = []
    c = cfg.in_channels
    for i in range(depth):
        d = last if (i == depth - 1 and last) else cfg.width
        s = _std(cfg, c, K) if std is None else std
        layers.append(ConvLayer.template(
            c, d, K, padding=padding, activation=activation, init_mean=mean, init_std=s,
            zero_bias=cfg.zero_bias,
        ))
        c = d
    return init_network(Network(tuple(layers), learning_rate=cfg.learning_rate, seed=seed), seed)


def _p_low(out):
    try:
        return p_low_ratio(dft2(out))
    except ZeroEnergy:
        return float("nan")


def _similarity(a, b):
    """Sample-averaged similarity of ``(B, C, M, N)`` spectra; dead channels skipped."""
    return float(np.mean([cosine_similarity_norm_maps(a[i], b[i], skip_zero=True) for i in range(len(a))]))


def _field_similarity(measured, predicted):
    """Similarity of two transfer-change fields ``(M, N, D, C)`` over their (d, c) entries."""
    a = np.transpose(measured, (2, 3, 0, 1))
    b = np.transpose(predicted, (2, 3, 0, 1))
    return cosine_similarity_norm_maps(a, b, skip_zero=True)


def _fit_line(y):
    """Least-squares line through ``(1..L, y)``: slope, intercept, R^2."""
    x = np.arange(1, len(y) + 1, dtype=float)
    slope, icept = np.polyfit(x, y, 1)
    pred = slope * x + icept
    ss_tot = np.sum((y - y.mean()) ** 2)
    r2 = 1.0 - np.sum((y - pred) ** 2) / ss_tot if ss_tot > 0 else 1.0
    return float(slope), float(icept), float(r2)


# --------------------------------------------------------------------------
# forward / backward verification


def _baseline(cfg, variant, seed):
    padding, activation = VARIANTS[variant]
    return build_stack(cfg, seed, padding=padding, activation=activation)


def exp_verify_forward(cfg, jobs=None):
    """Measured vs closed-form spectra after every layer of three baseline nets.

    ``forward_similarity`` compares against the full cascade prediction from the
    input spectrum (every layer taken as circular and linear);
    ``forward_similarity_layerwise`` applies one layer's transfer field to the
    spectrum of the actual layer input.
    """
    report = AnalysisReport(cfg.experiment, cfg.seed)
    x = _inputs(cfg)
    g = dft2(x)
    table = []
    for v_idx, variant in enumerate(cfg.variants):
        sims = np.zeros((cfg.n_seeds, cfg.depth))
        lw = np.zeros((cfg.n_seeds, cfg.depth))
        for r in range(cfg.n_seeds):
            net = _baseline(cfg, variant, replicate_seed(cfg.seed, r))
            _, trace = network_forward(net, x)
            inputs = [x] + trace[:-1]
            predicted = cascade_spectra(net, g, strict=False)
            for l, layer in enumerate(net.conv_layers):
                measured = dft2(trace[l])
                sims[r, l] = _similarity(measured, predicted[l])
                tf = compute_transfer_field(layer, (cfg.size, cfg.size))
                local = propagate_layer_same(tf, dft2(inputs[l]), layer.bias)
                lw[r, l] = _similarity(measured, local)
        for l in range(cfg.depth):
            s, s_lw = sims[:, l].mean(), lw[:, l].mean()
            report.add(f"forward_similarity/{variant}", (l + 1,), s)
            report.add(f"forward_similarity_layerwise/{variant}", (l + 1,), s_lw)
            table.append((variant, l + 1, s, s_lw))
        per_layer = sims.mean(axis=0)
        if variant == "linear_circular":
            report.checks[f"{variant}_exact"] = bool(np.all(np.abs(per_layer - 1.0) <= 1e-6))
        else:
            report.checks[f"{variant}_min_similarity_ge_0.8"] = bool(np.all(per_layer >= 0.8))
    report.tables["forward_similarity"] = (["variant", "layer", "similarity", "similarity_layerwise"], table)
    return report.finalize()


def exp_verify_backward(cfg, jobs=None):
    """Measured vs closed-form change of every transfer field after one SGD step."""
    report = AnalysisReport(cfg.experiment, cfg.seed)
    x = _inputs(cfg)
    size = (cfg.size, cfg.size)
    table = []
    degenerate = cfg.learning_rate == 0
    report.flags["degenerate"] = degenerate
    for variant in cfg.variants:
        sims = np.zeros((cfg.n_seeds, cfg.depth))
        lw = np.zeros((cfg.n_seeds, cfg.depth))
        peak = np.zeros((cfg.n_seeds, cfg.depth, 2))
        for r in range(cfg.n_seeds):
            net = _baseline(cfg, variant, replicate_seed(cfg.seed, r))
            target = synth_powerlaw_images(cfg.n_images, cfg.size, cfg.exponent,
                                           replicate_seed(cfg.seed, 20_000 + r), net.conv_layers[-1].out_channels)
            after = sgd_step(net, x, target)
            predicted = predict_delta_T_all(net, x, target, strict=False)
            out, trace = network_forward(net, x)
            _, grad = mse_loss_and_grad(out, target)
            _, layer_grads = backprop(net, x, grad, trace)
            inputs = [x] + trace[:-1]
            for l, layer in enumerate(net.conv_layers):
                measured = measure_delta_T(net, after, l, size)
                peak[r, l] = (np.abs(measured).max(), np.abs(predicted[l]).max())
                if degenerate:
                    continue
                sims[r, l] = _field_similarity(measured, predicted[l])
                gz = layer_grads[l]
                if layer.activation == "relu":
                    gz = gz * (conv_preactivation(layer, inputs[l]) > 0)
                local = delta_T_from_layer(inputs[l], gz, layer.kernel_size, net.learning_rate)
                lw[r, l] = _field_similarity(measured, local)
        for l in range(cfg.depth):
            report.add(f"delta_T_peak_measured/{variant}", (l + 1,), peak[:, l, 0].max())
            report.add(f"delta_T_peak_predicted/{variant}", (l + 1,), peak[:, l, 1].max())
            if not degenerate:
                report.add(f"backward_similarity/{variant}", (l + 1,), sims[:, l].mean())
                report.add(f"backward_similarity_layerwise/{variant}", (l + 1,), lw[:, l].mean())
                table.append((variant, l + 1, sims[:, l].mean(), lw[:, l].mean()))
        if degenerate:
            report.checks[f"{variant}_zero_change"] = bool(np.all(peak == 0))
            continue
        mean_sim = sims.mean()
        report.add(f"backward_similarity_mean/{variant}", (0,), mean_sim)
        if variant == "linear_circular":
            report.checks[f"{variant}_ge_0.999"] = bool(np.all(sims.mean(axis=0) >= 0.999))
        else:
            report.checks[f"{variant}_mean_ge_0.88"] = bool(mean_sim >= 0.88)
    report.tables["backward_similarity"] = (["variant", "layer", "similarity", "similarity_layerwise"], table)
    return report.finalize()


# --------------------------------------------------------------------------
# depth


def _depth_replicate(args):
    cfg, r, x = args
    net = build_stack(cfg, replicate_seed(cfg.seed, r))
    _, trace = network_forward(net, x)
    return np.stack([som_empirical(dft2(h)) for h in trace])  # (L, M, N)


def exp_depth_som(cfg, jobs=None):
    """Second moment of every layer's spectrum over depth in a deep same-size net."""
    report = AnalysisReport(cfg.experiment, cfg.seed)
    x = _inputs(cfg)
    mask = low_mask((cfg.size, cfg.size))
    soms = np.stack(_map_parallel(_depth_replicate, [(cfg, r, x) for r in range(cfg.n_seeds)], jobs))
    L = cfg.depth
    with np.errstate(divide="ignore", invalid="ignore"):
        low = soms[..., mask].mean(axis=-1)  # (R, L)
        high = soms[..., ~mask].mean(axis=-1)
        ratio = low / high
    r2 = []
    slopes = []
    for r in range(cfg.n_seeds):
        if np.all(low[r] > 0):
            s, _, q = _fit_line(np.log(low[r]))
        else:
            s, q = float("nan"), float("nan")
        r2.append(q)
        slopes.append(s)
        report.add("log_som_low_fit_r2", (r,), q)
        report.add("log_som_low_slope", (r,), s)
    mean_ratio = ratio.mean(axis=0)
    for l in range(L):
        report.add("som_low", (l + 1,), low[:, l].mean())
        report.add("som_high", (l + 1,), high[:, l].mean())
        report.add("som_low_high_ratio", (l + 1,), mean_ratio[l])
    mean_r2 = float(np.mean(r2))
    report.add("log_som_low_fit_r2_mean", (0,), mean_r2)
    report.checks["log_linear_r2_ge_0.9"] = bool(mean_r2 >= 0.9)
    report.checks["low_high_ratio_nondecreasing"] = bool(np.all(np.diff(mean_ratio) >= 0))

    grid = soms.mean(axis=0)
    report.tables["som_grid"] = (
        ["layer", "u", "v", "value"],
        [(l + 1, u, v, grid[l, u, v]) for l in range(L) for u in range(cfg.size) for v in range(cfg.size)],
    )
    report.tables["som_depth"] = (
        ["layer", "som_low", "som_high", "ratio"],
        [(l + 1, low[:, l].mean(), high[:, l].mean(), mean_ratio[l]) for l in range(L)],
    )
    net = build_stack(cfg, replicate_seed(cfg.seed, 0))
    _, trace = network_forward(net, x)
    for l, h in enumerate(trace):
        report.images[f"layer{l + 1:02d}"] = magnitude_map_render(dft2(h[0]))
    return report.finalize()


# --------------------------------------------------------------------------
# p_low trends


def _plow_replicate(args):
    cfg, r, x, kw = args
    net = build_stack(cfg, replicate_seed(cfg.seed, r), **kw)
    out, _ = network_forward(net, x)
    return _p_low(out)


def _plow_table(cfg, x, settings, jobs):
    """p_low of every replicate for every setting (dict of build_stack overrides)."""
    tasks = [(cfg, r, x, kw) for kw in settings for r in range(cfg.n_seeds)]
    vals = np.array(_map_parallel(_plow_replicate, tasks, jobs)).reshape(len(settings), cfg.n_seeds)
    return vals


def _trend_rows(report, name, labels, vals):
    table = []
    for i, (lab, v) in enumerate(zip(labels, vals)):
        for r, p in enumerate(v):
            report.add(f"{name}", (i, r), p)
        report.add(f"{name}_mean", (i,), np.nanmean(v))
        report.add(f"{name}_std", (i,), np.nanstd(v))
        table.append((lab, np.nanmean(v), np.nanstd(v), int(np.sum(np.isfinite(v)))))
    return table


def exp_kernel_size(cfg, jobs=None):
    report = AnalysisReport(cfg.experiment, cfg.seed)
    x = _inputs(cfg)
    settings = [dict(K=k) for k in cfg.kernel_sizes]
    vals = _plow_table(cfg, x, settings, jobs)
    table = _trend_rows(report, "p_low", cfg.kernel_sizes, vals)
    report.tables["p_low_by_kernel"] = (["kernel_size", "mean", "std", "count"], table)
    means = np.nanmean(vals, axis=1)
    report.checks["p_low_decreasing_in_K"] = bool(np.all(np.diff(means) < 0))
    for k in cfg.kernel_sizes:
        net = build_stack(cfg, replicate_seed(cfg.seed, 0), K=k)
        out, _ = network_forward(net, x)
        report.images[f"K{k}"] = magnitude_map_render(dft2(out[0]))
    return report.finalize()


def _tzero_samples(cfg, mean, draws):
    """``TT[0, 0]`` of ``draws`` freshly initialized nets (weights summed over taps)."""
    out = []
    for r in range(draws):
        net = build_stack(cfg, replicate_seed(cfg.seed, 50_000 + r), mean=mean)
        prod = None
        for layer in net.conv_layers:
            t00 = layer.weights.sum(axis=(2, 3))
            prod = t00 if prod is None else t00 @ prod
        out.append(prod)
    return np.stack(out)


def exp_mean_bias(cfg, jobs=None):
    """p_low as a function of the weight mean, plus an analytic second-moment cross-check."""
    report = AnalysisReport(cfg.experiment, cfg.seed)
    x = _inputs(cfg)
    settings = [dict(mean=m) for m in cfg.means]
    vals = _plow_table(cfg, x, settings, jobs)
    table = _trend_rows(report, "p_low", cfg.means, vals)
    report.tables["p_low_by_mean"] = (["init_mean", "mean", "std", "count"], table)
    means = np.nanmean(vals, axis=1)
    report.checks["p_low_increasing_in_mean"] = bool(np.all(np.diff(means) > 0))
    for i, m in enumerate(cfg.means):
        net = build_stack(cfg, replicate_seed(cfg.seed, 0), mean=m)
        out, _ = network_forward(net, x)
        report.images[f"mean{i}"] = magnitude_map_render(dft2(out[0]))

    # second moment of the cascade at the fundamental, lowest vs highest mean
    lo, hi = min(cfg.means), max(cfg.means)
    if lo != hi:
        channels = [l.out_channels for l in build_stack(cfg, 0).conv_layers]
        analytic = {}
        empirical = {}
        for m in (lo, hi):
            std = cfg.init_std if cfg.init_std is not None else None
            layers = []
            c = cfg.in_channels
            for d in channels:
                layers.append((d, m, _std(cfg, c, cfg.kernel_size) if std is None else std))
                c = d
            size = (cfg.size, cfg.size)
            analytic[m] = som_multichannel_analytic(layers, 0, 0, size, cfg.kernel_size)
            t = _tzero_samples(cfg, m, cfg.analytic_draws)
            empirical[m] = float(np.mean(np.abs(t) ** 2))
        a_ratio = analytic[hi] / analytic[lo]
        e_ratio = empirical[hi] / empirical[lo]
        report.add("som_fundamental_ratio_analytic", (0,), a_ratio)
        report.add("som_fundamental_ratio_empirical", (0,), e_ratio)
        report.checks["som_ratio_within_15pct"] = bool(abs(e_ratio - a_ratio) <= 0.15 * abs(a_ratio))
    return report.finalize()


def exp_padding(cfg, jobs=None):
    """Zero vs circular padding on paired nets, plus the one-side padding signal grid."""
    report = AnalysisReport(cfg.experiment, cfg.seed)
    x = _inputs(cfg)
    pads = ("zero_same", "circular")
    vals = _plow_table(cfg, x, [dict(padding=p) for p in pads], jobs)
    table = _trend_rows(report, "p_low", pads, vals)
    report.tables["p_low_by_padding"] = (["padding", "mean", "std", "count"], table)
    diff = vals[0] - vals[1]
    report.add("p_low_paired_diff_mean", (0,), np.nanmean(diff))
    report.add("p_low_paired_diff_std", (0,), np.nanstd(diff))
    report.checks["zero_padding_more_low_frequency"] = bool(np.nanmean(vals[0]) > np.nanmean(vals[1]))
    for p in pads:
        net = build_stack(cfg, replicate_seed(cfg.seed, 0), padding=p)
        out, _ = network_forward(net, x)
        report.images[p] = magnitude_map_render(dft2(out[0]))

    grid_rows, ok = zero_padding_overlay(cfg)
    report.tables["zero_padding_signal"] = (
        ["u", "v", "predicted", "mean_abs_diff", "se_abs_diff", "abs_mean_diff", "se_mean_diff"], grid_rows,
    )
    report.add("zero_padding_bins_within_3se", (0,), ok.sum())
    report.add("zero_padding_bins_mean_within_3se", (0,), sum(
        abs(r[5] - r[2]) <= 3 * r[6] + 1e-12 for r in grid_rows))
    return report.finalize()


def zero_padding_overlay(cfg):
    """Predicted vs Monte Carlo strength of the signal added by one-side zero padding.

    Returns table rows ``(u, v, predicted, mean|H-G|, se, |mean(H-G)|, se)`` and a
    boolean grid telling where ``mean|H-G|`` lies within 3 standard errors.
    """
    M = cfg.pad_in_size
    Mp = cfg.pad_out_size
    pred = zero_padding_expected_signal(cfg.pad_feature_mean, (M, M), (Mp, Mp), cfg.pad_feature_std).strength
    diff = zero_padding_monte_carlo(cfg.pad_feature_mean, cfg.pad_feature_std, (M, M), (Mp, Mp),
                                    cfg.pad_draws, replicate_seed(cfg.seed, 30_000))
    n = diff.shape[0]
    mag = np.abs(diff)
    mean_abs = mag.mean(axis=0)
    se_abs = mag.std(axis=0, ddof=1) / np.sqrt(n)
    mean_c = diff.mean(axis=0)
    abs_mean = np.abs(mean_c)
    # standard error of |mean| from the spread of the complex samples
    se_mean = np.sqrt(np.mean(np.abs(diff - mean_c) ** 2, axis=0) / n)
    ok = np.abs(mean_abs - pred) <= 3 * se_abs + 1e-12
    rows = [
        (u, v, pred[u, v], mean_abs[u, v], se_abs[u, v], abs_mean[u, v], se_mean[u, v])
        for u in range(Mp) for v in range(Mp)
    ]
    return rows, ok


# --------------------------------------------------------------------------
# upsampling


def _upsample_net(cfg, seed, blocks):
    layers = []
    c = cfg.in_channels
    K = cfg.kernel_size
    for _ in range(blocks):
        layers.append(UpsampleLayer(2))
        layers.append(ConvLayer.template(
            c, cfg.width, K, padding=cfg.padding, activation=cfg.activation, init_mean=cfg.init_mean,
            init_std=_std(cfg, c, K), zero_bias=cfg.zero_bias,
        ))
        c = cfg.width
    return init_network(Network(tuple(layers), learning_rate=cfg.learning_rate, seed=seed), seed)


def _grid_points(size, period):
    M, N = size
    return [(u, v) for u in range(0, M, period[0]) for v in range(0, N, period[1])]


def _upsampling_replicate(args):
    cfg, r, x = args
    net = _upsample_net(cfg, replicate_seed(cfg.seed, r), cfg.blocks)
    _, trace = network_forward(net, x)
    inputs = [x] + trace[:-1]
    out = []
    for b in range(cfg.blocks):
        before = inputs[2 * b]
        g = dft2(before)
        up = dft2(trace[2 * b])
        tile_err = float(np.max(np.abs(up - upsample_spectrum_predict(g, 2))))
        M0, N0 = before.shape[-2:]
        pts = _grid_points(up.shape[-2:], (M0, N0))
        mag_up = np.abs(up).mean(axis=tuple(range(up.ndim - 2)))
        g00 = np.abs(g[..., 0, 0]).mean()
        grid_err = max(abs(mag_up[u, v] - g00) for u, v in pts)
        conv = dft2(trace[2 * b + 1])
        mag_conv = np.abs(conv).mean(axis=tuple(range(conv.ndim - 2)))
        high = np.mean([mag_conv[u, v] for u, v in pts if (u, v) != (0, 0)])
        ratio = high / mag_conv[0, 0] if mag_conv[0, 0] > 0 else float("nan")
        out.append((tile_err, grid_err / max(g00, 1e-300), ratio))
    return out


def exp_upsampling(cfg, jobs=None):
    """Spectrum replication by zero-insertion upsampling and its damping by convolution."""
    report = AnalysisReport(cfg.experiment, cfg.seed)
    x = _inputs(cfg, size=cfg.input_size)
    res = np.array(_map_parallel(_upsampling_replicate, [(cfg, r, x) for r in range(cfg.n_seeds)], jobs))
    # res: (R, blocks, 3)
    table = []
    for b in range(cfg.blocks):
        tile_err = res[:, b, 0].max()
        grid_err = res[:, b, 1].max()
        ratio = np.nanmean(res[:, b, 2])
        report.add("tile_max_abs_error", (b + 1,), tile_err)
        report.add("grid_rel_error", (b + 1,), grid_err)
        report.add("replica_ratio_after_conv", (b + 1,), ratio)
        for r in range(cfg.n_seeds):
            report.add("replica_ratio_after_conv_seed", (b + 1, r), res[r, b, 2])
        table.append((b + 1, tile_err, grid_err, ratio))
    report.tables["upsampling"] = (["block", "tile_max_abs_error", "grid_rel_error", "replica_ratio"], table)
    report.checks["tiling_exact"] = bool(np.all(res[:, :, 0] <= 1e-8 * max(1.0, np.abs(dft2(x)).max()) * 4**cfg.blocks))
    report.checks["grid_equals_fundamental"] = bool(np.all(res[:, :, 1] <= 1e-9))
    report.checks["replicas_attenuated"] = bool(np.all(np.nanmean(res[:, :, 2], axis=0) < 1.0))

    net = _upsample_net(cfg, replicate_seed(cfg.seed, 0), cfg.blocks)
    _, trace = network_forward(net, x)
    for b in range(cfg.blocks):
        report.images[f"block{b + 1}_upsampled"] = magnitude_map_render(dft2(trace[2 * b][0]))
        report.images[f"block{b + 1}_conv"] = magnitude_map_render(dft2(trace[2 * b + 1][0]))
    return report.finalize()


# --------------------------------------------------------------------------
# training


def decoder_network(cfg, seed):
    """Two (upsample, conv) blocks followed by two convs; the last conv is linear."""
    K = cfg.kernel_size
    W = cfg.width
    C = cfg.in_channels

    def conv(c, d, act):
        return ConvLayer.template(c, d, K, padding=cfg.padding, activation=act, init_mean=cfg.init_mean,
                                  init_std=_std(cfg, c, K), zero_bias=cfg.zero_bias)

    layers = [
        UpsampleLayer(2), conv(C, W, cfg.activation),
        UpsampleLayer(2), conv(W, W, cfg.activation),
        conv(W, W, cfg.activation),
        conv(W, C, "identity"),
    ]
    return init_network(Network(tuple(layers), learning_rate=cfg.learning_rate, seed=seed), seed)


def downsample(x, factor):
    """Average pooling by an integer factor (the decoder's input)."""
    *lead, M, N = x.shape
    return x.reshape(tuple(lead) + (M // factor, factor, N // factor, factor)).mean(axis=(-3, -1))


def grid_contrast(h, period):
    """Mean magnitude on the replica grid (fundamental excluded) over the mean at its 4-neighbours."""
    mag = np.abs(h).reshape((-1,) + h.shape[-2:]).mean(axis=0)
    M, N = mag.shape
    pts = [(u, v) for u, v in _grid_points((M, N), (period, period)) if (u, v) != (0, 0)]
    on = np.mean([mag[u, v] for u, v in pts])
    nb = np.mean([mag[(u + du) % M, (v + dv) % N] for u, v in pts for du, dv in ((1, 0), (-1, 0), (0, 1), (0, -1))])
    return float(on / nb) if nb > 0 else float("nan")


def _train_replicate(args):
    cfg, r, x, target, keep_maps = args
    net = decoder_network(cfg, replicate_seed(cfg.seed, r))
    mask = low_mask(target.shape[-2:])
    ht = dft2(target)
    hist = []
    maps = {}
    period = target.shape[-1] // 4
    for e in range(cfg.epochs + 1):
        out, _ = network_forward(net, x)
        ho = dft2(out)
        err = np.abs(ho - ht) ** 2
        hist.append((err[..., mask].sum(), err[..., ~mask].sum(), grid_contrast(ho, period)))
        if keep_maps and (e % cfg.map_every == 0 or e == cfg.epochs):
            maps[e] = magnitude_map_render(ho[0])
        if e < cfg.epochs:
            net = sgd_step(net, x, target)
    return np.array(hist), maps


def exp_training_lowfreq_first(cfg, jobs=None):
    """Band-wise reconstruction error of a small decoder over SGD epochs."""
    report = AnalysisReport(cfg.experiment, cfg.seed)
    M = cfg.size
    if M % 4:
        raise ConfigError("train-demo size must be divisible by 4")
    target = synth_powerlaw_images(cfg.n_images, M, cfg.exponent, replicate_seed(cfg.seed, 10_000), cfg.in_channels)
    if cfg.center_inputs:
        target = target - target.mean(axis=(-2, -1), keepdims=True)
    x = downsample(target, 4)
    results = _map_parallel(
        _train_replicate, [(cfg, r, x, target, r == 0) for r in range(cfg.n_seeds)], jobs)
    hist = np.stack([h for h, _ in results])  # (R, E+1, 3)
    E = cfg.epochs
    k = max(1, E // 10) if E > 0 else 0
    for e in range(E + 1):
        report.add("error_low", (e,), hist[:, e, 0].mean())
        report.add("error_high", (e,), hist[:, e, 1].mean())
        report.add("grid_contrast", (e,), hist[:, e, 2].mean())
    rel_low = 1.0 - hist[:, k, 0] / hist[:, 0, 0]
    rel_high = 1.0 - hist[:, k, 1] / hist[:, 0, 1]
    for r in range(cfg.n_seeds):
        report.add("rel_reduction_low_seed", (r,), rel_low[r])
        report.add("rel_reduction_high_seed", (r,), rel_high[r])
    report.add("rel_reduction_low", (0,), rel_low.mean())
    report.add("rel_reduction_high", (0,), rel_high.mean())
    report.add("rel_reduction_low_std", (0,), rel_low.std())
    report.add("rel_reduction_high_std", (0,), rel_high.std())
    if E > 0:
        report.checks["low_band_learned_first"] = bool(rel_low.mean() > rel_high.mean())
        report.checks["grid_contrast_decreases"] = bool(hist[:, E, 2].mean() < hist[:, 0, 2].mean())
    report.tables["band_errors"] = (
        ["epoch", "error_low", "error_high", "grid_contrast"],
        [(e, hist[:, e, 0].mean(), hist[:, e, 1].mean(), hist[:, e, 2].mean()) for e in range(E + 1)],
    )
    for e, img in results[0][1].items():
        report.images[f"epoch{e:04d}"] = img
    return report.finalize()


RUNNERS = {
    "verify-forward": exp_verify_forward,
    "verify-backward": exp_verify_backward,
    "depth-som": exp_depth_som,
    "kernel-size": exp_kernel_size,
    "mean-bias": exp_mean_bias,
    "padding": exp_padding,
    "upsampling": exp_upsampling,
    "train-demo": exp_training_lowfreq_first,
}


def run_experiment(cfg, jobs=None):
    return RUNNERS[cfg.experiment](cfg, jobs=jobs)
