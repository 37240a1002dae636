"""Closed-form spectrum propagation through convolutional decoders."""
from .analysis import (
    R_grid,
    compute_R,
    magnitude_map_render,
    p_low_ratio,
    som_multichannel_analytic,
    som_singlechannel_log,
    transfer_entry_law,
    upsample_spectrum_predict,
    zero_padding_expected_signal,
)
from .estimators import ConvDecoder, SpectrumTransformer
from .exceptions import ConfigError, FreqPropError, IoError, ShapeMismatch
from .experiments import AnalysisReport, ExperimentConfig, run_experiment, synth_powerlaw_images
from .network import ConvLayer, Network, UpsampleLayer, init_network, network_forward, sgd_step
from .propagation import (
    cascade_transfer,
    compute_transfer_field,
    predict_delta_T,
    predict_output_spectrum,
    propagate_layer_general,
    propagate_layer_same,
)
from .tensor import dft2, idft2

__version__ = "0.1.0"
