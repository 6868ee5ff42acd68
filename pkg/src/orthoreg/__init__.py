"""Kernel orthogonality regularization toolkit.

Strict and relaxed disentangled norms, Frobenius and SRIP baselines,
relaxation planning, loss-share scheduling and a small dense trainer.
"""
from .measures import (NearOrthReport, PairMask, RegularizerResult, RegularizerSpec, Variant,
                       aggregate_reports, correlation_tril, decomposed_frobenius, disentangled_loss,
                       frobenius_loss, gram, near_orth_report, regularizer_gradient,
                       scaled_frobenius_loss, srip_loss)
from .tensor import (KernelMatrix, KernelTensor, LayerDescriptor, load_architecture, load_tensor,
                     reshape_kernel, save_tensor)

__version__ = "0.1.0"
