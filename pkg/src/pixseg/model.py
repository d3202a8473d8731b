import torch
import torch.nn as nn
import torch.nn.functional as F


class PixelEmbedder(nn.Module):
    """Small fully convolutional network producing unit-length pixel embeddings.

    Stands in for the dilated-ResNet PSPNet used at full scale; resolution is
    preserved so every input pixel gets an embedding.
    """

    def __init__(self, dim, hidden=64, depth=3):
        super().__init__()
        layers = []
        c_in = 3
        for _ in range(depth):
            layers += [nn.Conv2d(c_in, hidden, 3, padding=1), nn.ReLU(inplace=True)]
            c_in = hidden
        layers.append(nn.Conv2d(hidden, dim, 1))
        self.body = nn.Sequential(*layers)
        self.dim = dim

    def forward(self, x):
        # x: (B, 3, H, W) in [0, 1]
        return F.normalize(self.body(2.0 * x - 1.0), dim=1, eps=1e-12)

    @torch.no_grad()
    def embed(self, image):
        """(H, W, 3) float image -> (H, W, d) numpy embeddings."""
        x = torch.as_tensor(image, dtype=torch.float32).permute(2, 0, 1)[None]
        return self(x)[0].permute(1, 2, 0).double().numpy()
