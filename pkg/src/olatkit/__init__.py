"""olatkit: OLAT image-based relighting with a trainable triplane reflectance field.

Modules
    imagecore     HDR/LDR containers, Radiance and PFM codecs, tone mapping
    lightrig      rigs, manifests, env-map -> per-light weights
    relight       streaming/tiled weighted OLAT combination
    align         dense flow, warping, take alignment
    reflectfield  trainable triplane field with manual gradients
    quality       L1 / ID-MRF losses, PSNR / SSIM / RMSE metrics
    oracle        analytic sphere ground truth and fixtures
    cli           command-line front end
    service       HTTP facade for the interactive UI
"""

__version__ = "0.1.0"
