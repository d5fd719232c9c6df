# Differentiable Gaussian splatting
