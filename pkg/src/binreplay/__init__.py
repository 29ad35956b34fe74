"""Binary-network continual learning with 1-bit latent replay and quantized backprop."""

from .bitpack import BinConvSpec, BitTensor, bin_conv2d, bin_matmul, binarize, pack, unpack, xnor_dot
from .graph import (
    BitwidthConfig,
    Graph,
    backward,
    forward,
    mac_count,
    sgd_step,
    softmax_ce,
    ste_backward,
)
from .quant import (
    QuantParams,
    QuantizedTensor,
    calibrate_range,
    dequantize,
    qmatmul,
    quant_params,
    quantize,
    requantize,
)
from .replay import LatentSample, ReplayMemory, memory_footprint_bits, sample_minibatch, update_after_experience

__version__ = "0.1.0"
