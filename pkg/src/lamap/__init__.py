"""Learned acoustic maps on spherical microphone arrays.

Submodules: ``geometry`` (arrays, tessellations, steering), ``dsp`` (STFT, cross-spectral
matrices, upsampling), ``simulator`` (synthetic scenes), ``beamform`` (DAS/MUSIC),
``lam`` (encoder/denoiser/decoder model), ``train`` (optimization and gradient checks),
``doae`` (K-means direction estimates and LE/LR), ``cli``.
"""

__version__ = "0.1.0"
