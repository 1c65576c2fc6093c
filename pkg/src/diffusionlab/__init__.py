"""Toy-scale laboratory for classifier-free guided diffusion: a DDIM engine with
staged guidance policies, Fourier band analysis, a synthetic prompt/image
world, a hand-differentiated cross-attention denoiser and attention probes."""

__version__ = "0.1.0"
