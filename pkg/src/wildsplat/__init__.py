"""Few-shot Gaussian splatting with diffusion-based view enhancement.

Library layout:
  tensor / nnops / optim   reverse-mode autodiff core and network ops
  scene / rasterizer       Gaussian cloud, cameras, tiled differentiable renderer
  losses                   L1 / SSIM training losses and evaluation metrics
  diffusion                latent codec, denoiser, DDIM sampling and inversion
  enhance / occlusion      pseudo-ground-truth generation (novel views, inpainting)
  views / trainer          pose sampling curriculum and the training loop
  synth                    procedural dataset generator and loaders
  config / cli / report    run configuration, command line, figure output
"""

__version__ = "0.1.0"
