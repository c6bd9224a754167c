"""Universal multi-modality image compression at desk scale.

Basic codecs produce a decoded image, leveled captions travel losslessly
beside it, and a conditional latent diffusion compensator reconstructs a
perceptually enhanced image.
"""

__version__ = "0.1.0"
