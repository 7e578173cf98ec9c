"""From-scratch deep-learning toolkit for segmenting X-ray micro-CT slice
stacks: a numpy tensor library with reverse-mode autodiff, an FCN with a
residual bottleneck backbone, the training protocol, epsilon-corrected
pixelwise metrics, and per-class binary volume export.
"""

from .autodiff import (BatchNormState, ConvParams, Tensor, add, backward,
                       batchnorm2d, bce_with_logits, bilinear_upsample, conv2d,
                       dropout, maxpool2d, no_grad, relu)
from .data import (ClassEntry, ClassMap, GrayImage, LabelMask, SamplePair,
                   compose_three_layer_mask, decode_mask, downscale_image,
                   downscale_mask, encode_mask, load_gray, load_pairs, save_gray,
                   to_model_input, to_onehot)
from .errors import DataError, NumericalError
from .metrics import (ConfusionCounts, MetricsReport, accuracy, confusion, evaluate,
                      f1, precision, recall)
from .model import (Model, ModelSpec, build_fcn, load_weights, replace_classifier,
                    save_weights, summarize)
from .training import (AdamState, LossHistory, TrainConfig, TrainResult, adam_step,
                       augment, split_train_val, sweep, train)
from .volume import (BinarySlice, Volume, predict_labels, predict_slices,
                     slice_stats, stack)

__version__ = "0.1.0"
