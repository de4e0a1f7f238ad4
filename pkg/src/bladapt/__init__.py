"""Bilevel fast scene adaptation for low-light image enhancement.

Modules:
    tensor, functional   numpy tensors with tape-based reverse-mode autodiff
    network              Retinex U-Net (encoder/decoder) and residual denoiser
    losses               supervised, unsupervised and split-group denoising losses
    bilevel              one-step hypergradients, finite-difference products, Adam
    data                 synthetic multi-scene low-light benchmark
    metrics              PSNR, SSIM, DE, LOE and CSV reports
    phases               learn / adapt / test drivers
    checkpoint, config   on-disk formats
    gradcheck, oracle    diagnostics
    cli                  ``bladapt`` entry point
"""

__version__ = "0.1.0"
