from .gradcheck import check_gradients, numeric_grad, relative_error
from .ops import (
    avgpool2,
    concat_channels,
    conv2d,
    conv2x2_stride2,
    conv_transpose2x2,
    gaussian_filter_valid,
    he_normal,
    image_to_spectrum,
    maxpool2,
    relu,
    spectrum_to_image,
)
from .tensor import Parameter, Tensor, as_tensor, backward, no_grad

__all__ = [
    "Tensor",
    "Parameter",
    "as_tensor",
    "backward",
    "no_grad",
    "conv2d",
    "conv_transpose2x2",
    "conv2x2_stride2",
    "maxpool2",
    "avgpool2",
    "relu",
    "concat_channels",
    "gaussian_filter_valid",
    "image_to_spectrum",
    "spectrum_to_image",
    "he_normal",
    "check_gradients",
    "numeric_grad",
    "relative_error",
]
