from ._nerfsim import psnr, read_png, ssim, synth, write_png

__all__ = ["psnr", "read_png", "ssim", "synth", "write_png"]
