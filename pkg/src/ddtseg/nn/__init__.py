"""Small U-Net with hand-written backward passes, losses, Adam and training."""
