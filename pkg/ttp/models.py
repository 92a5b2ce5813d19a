"""Generator G_theta, discriminator family D_psi and surrogate ensembles."""

from typing import Dict, List, Sequence, Type, Union

import torch
import torch.nn as nn
import torch.nn.functional as F

from ttp.errors import ShapeMismatch

# per-channel input statistics; discriminators consume [0, 1] pixels and normalize inside
_STATS = {
    3: ((0.4914, 0.4822, 0.4465), (0.2470, 0.2435, 0.2616)),
    1: ((0.1307,), (0.3081,)),
}


class ResnetBlock(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.conv_block = nn.Sequential(
            nn.ReflectionPad2d(1),
            nn.Conv2d(dim, dim, kernel_size=3, bias=False),
            nn.InstanceNorm2d(dim, affine=True),
            nn.ReLU(True),
            nn.ReflectionPad2d(1),
            nn.Conv2d(dim, dim, kernel_size=3, bias=False),
            nn.InstanceNorm2d(dim, affine=True),
        )

    def forward(self, x):
        return x + self.conv_block(x)


class ResnetGenerator(nn.Module):
    """Encoder (2 stride-2 convs) - residual blocks - decoder (2 transposed convs).

    Instance norm keeps samples independent. The output goes through
    (tanh + 1) / 2, so the unbounded adversary already lies in [0, 1].
    """

    kind = "resnet"

    def __init__(self, in_channels: int = 3, ngf: int = 32, n_blocks: int = 4, zero_init_output: bool = False):
        super().__init__()
        self.in_channels = in_channels
        self.hparams = {"ngf": ngf, "n_blocks": n_blocks}
        self.encoder = nn.Sequential(
            nn.ReflectionPad2d(3),
            nn.Conv2d(in_channels, ngf, kernel_size=7, bias=False),
            nn.InstanceNorm2d(ngf, affine=True),
            nn.ReLU(True),
            nn.Conv2d(ngf, ngf * 2, kernel_size=3, stride=2, padding=1, bias=False),
            nn.InstanceNorm2d(ngf * 2, affine=True),
            nn.ReLU(True),
            nn.Conv2d(ngf * 2, ngf * 4, kernel_size=3, stride=2, padding=1, bias=False),
            nn.InstanceNorm2d(ngf * 4, affine=True),
            nn.ReLU(True),
        )
        self.bottle_neck = nn.Sequential(*[ResnetBlock(ngf * 4) for _ in range(n_blocks)])
        self.decoder = nn.Sequential(
            nn.ConvTranspose2d(ngf * 4, ngf * 2, kernel_size=3, stride=2, padding=1, output_padding=1, bias=False),
            nn.InstanceNorm2d(ngf * 2, affine=True),
            nn.ReLU(True),
            nn.ConvTranspose2d(ngf * 2, ngf, kernel_size=3, stride=2, padding=1, output_padding=1, bias=False),
            nn.InstanceNorm2d(ngf, affine=True),
            nn.ReLU(True),
            nn.ReflectionPad2d(3),
        )
        self.head = nn.Conv2d(ngf, in_channels, kernel_size=7)
        if zero_init_output:
            nn.init.zeros_(self.head.weight)
            nn.init.zeros_(self.head.bias)

    def forward(self, x):
        x = self.decoder(self.bottle_neck(self.encoder(x)))
        return (torch.tanh(self.head(x)) + 1.0) / 2.0


class ToyGenerator(nn.Module):
    """Two smooth conv layers; small enough for finite-difference checks."""

    kind = "toy"

    def __init__(self, in_channels: int = 3, hidden: int = 8, zero_init_output: bool = False):
        super().__init__()
        self.in_channels = in_channels
        self.hparams = {"hidden": hidden}
        self.conv1 = nn.Conv2d(in_channels, hidden, kernel_size=3, padding=1)
        self.conv2 = nn.Conv2d(hidden, in_channels, kernel_size=3, padding=1)
        if zero_init_output:
            nn.init.zeros_(self.conv2.weight)
            nn.init.zeros_(self.conv2.bias)

    def forward(self, x):
        return (torch.tanh(self.conv2(torch.tanh(self.conv1(x)))) + 1.0) / 2.0


GENERATORS: Dict[str, Type[nn.Module]] = {"resnet": ResnetGenerator, "toy": ToyGenerator}


def build_generator(kind: str = "resnet", in_channels: int = 3, **kwargs) -> nn.Module:
    if kind not in GENERATORS:
        raise ValueError(f"unknown generator kind {kind!r}; expected one of {sorted(GENERATORS)}")
    return GENERATORS[kind](in_channels=in_channels, **kwargs)


class Discriminator(nn.Module):
    """Classifier whose raw outputs (logits or penultimate features) guide the generator."""

    arch = "base"

    def __init__(self, in_channels: int, num_classes: int):
        super().__init__()
        self.in_channels = in_channels
        self.num_classes = num_classes
        self.feature_layer = "logits"
        self.tag = self.arch
        mean, std = _STATS.get(in_channels, ((0.5,) * in_channels, (0.25,) * in_channels))
        self.register_buffer("mean", torch.tensor(mean).view(1, -1, 1, 1))
        self.register_buffer("std", torch.tensor(std).view(1, -1, 1, 1))

    def embed(self, x: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def classify(self, h: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def forward(self, x):
        return self.classify(self.embed((x - self.mean) / self.std))

    def features(self, x: torch.Tensor) -> torch.Tensor:
        h = self.embed((x - self.mean) / self.std)
        return h if self.feature_layer == "penultimate" else self.classify(h)

    def freeze(self) -> "Discriminator":
        self.eval()
        for p in self.parameters():
            p.requires_grad_(False)
        return self

    @property
    def frozen(self) -> bool:
        return not self.training and not any(p.requires_grad for p in self.parameters())


def _conv_bn(cin: int, cout: int, batch_norm: bool) -> List[nn.Module]:
    layers: List[nn.Module] = [nn.Conv2d(cin, cout, kernel_size=3, padding=1, bias=not batch_norm)]
    if batch_norm:
        layers.append(nn.BatchNorm2d(cout))
    layers.append(nn.ReLU(inplace=True))
    return layers


class ConvNetA(Discriminator):
    """4 conv layers + 2 fc layers."""

    arch = "convnet-a"

    def __init__(self, in_channels: int = 3, num_classes: int = 10, batch_norm: bool = True):
        super().__init__(in_channels, num_classes)
        self.body = nn.Sequential(
            *_conv_bn(in_channels, 32, batch_norm),
            *_conv_bn(32, 32, batch_norm),
            nn.MaxPool2d(2),
            *_conv_bn(32, 64, batch_norm),
            *_conv_bn(64, 64, batch_norm),
            nn.MaxPool2d(2),
            nn.AdaptiveAvgPool2d(4),
            nn.Flatten(),
        )
        self.fc1 = nn.Linear(64 * 4 * 4, 256)
        self.fc2 = nn.Linear(256, num_classes)

    def embed(self, x):
        # pre-activation so penultimate rows are never all-zero
        return self.fc1(self.body(x))

    def classify(self, h):
        return self.fc2(F.relu(h))


class BasicBlock(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, kernel_size=3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, kernel_size=3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.shortcut = nn.Sequential()
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(
                nn.Conv2d(cin, cout, kernel_size=1, stride=stride, bias=False), nn.BatchNorm2d(cout)
            )

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class ResNetS(Discriminator):
    """3-stage residual net (16/32/64 channels, 2 blocks per stage)."""

    arch = "resnet-s"

    def __init__(self, in_channels: int = 3, num_classes: int = 10, batch_norm: bool = True, blocks: int = 2):
        super().__init__(in_channels, num_classes)
        self.stem = nn.Sequential(
            nn.Conv2d(in_channels, 16, kernel_size=3, padding=1, bias=False), nn.BatchNorm2d(16), nn.ReLU(True)
        )
        stages: List[nn.Module] = []
        cin = 16
        for cout, stride in ((16, 1), (32, 2), (64, 2)):
            for b in range(blocks):
                stages.append(BasicBlock(cin, cout, stride if b == 0 else 1))
                cin = cout
        self.stages = nn.Sequential(*stages)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.fc = nn.Linear(64, num_classes)

    def embed(self, x):
        return torch.flatten(self.pool(self.stages(self.stem(x))), 1)

    def classify(self, h):
        return self.fc(h)


class ToyDiscriminator(Discriminator):
    arch = "toy"

    def __init__(self, in_channels: int = 3, num_classes: int = 5, batch_norm: bool = False):
        super().__init__(in_channels, num_classes)
        self.conv = nn.Conv2d(in_channels, 4, kernel_size=3, padding=1)
        self.pool = nn.AdaptiveAvgPool2d(2)
        self.fc = nn.Linear(16, num_classes)

    def embed(self, x):
        return torch.flatten(self.pool(torch.tanh(self.conv(x))), 1)

    def classify(self, h):
        return self.fc(h)


DISCRIMINATORS: Dict[str, Type[Discriminator]] = {c.arch: c for c in (ConvNetA, ResNetS, ToyDiscriminator)}


def build_discriminator(arch: str, in_channels: int = 3, num_classes: int = 10, batch_norm: bool = True) -> Discriminator:
    if arch not in DISCRIMINATORS:
        raise ValueError(f"unknown discriminator arch {arch!r}; expected one of {sorted(DISCRIMINATORS)}")
    return DISCRIMINATORS[arch](in_channels=in_channels, num_classes=num_classes, batch_norm=batch_norm)


class DiscriminatorEnsemble:
    """Same-family surrogates whose per-member losses are averaged."""

    combine = "mean-loss"

    def __init__(self, members: Sequence[Discriminator]):
        if not members:
            raise ValueError("an ensemble needs at least one member")
        channels = {m.in_channels for m in members}
        if len(channels) != 1:
            raise ShapeMismatch(f"ensemble members disagree on input channels: {sorted(channels)}")
        self.members = list(members)

    def __len__(self) -> int:
        return len(self.members)

    def __iter__(self):
        return iter(self.members)

    @property
    def in_channels(self) -> int:
        return self.members[0].in_channels

    @property
    def tag(self) -> str:
        return "+".join(m.tag for m in self.members)

    @property
    def frozen(self) -> bool:
        return all(m.frozen for m in self.members)

    def freeze(self) -> "DiscriminatorEnsemble":
        for m in self.members:
            m.freeze()
        return self

    def set_feature_layer(self, layer: str) -> None:
        for m in self.members:
            m.feature_layer = layer


def _check_batch(batch: torch.Tensor, channels: int) -> None:
    if batch.dim() != 4 or batch.shape[1] != channels:
        raise ShapeMismatch(f"expected N x {channels} x H x W, got {tuple(batch.shape)}")


def generator_forward(gen: nn.Module, batch: torch.Tensor) -> torch.Tensor:
    """Unbounded (pre-projection) adversary in [0, 1]; differentiable w.r.t. gen's parameters."""
    _check_batch(batch, gen.in_channels)
    out = gen(batch)
    if out.shape != batch.shape:
        raise ShapeMismatch(f"generator maps {tuple(batch.shape)} to {tuple(out.shape)}")
    return out


def discriminator_features(
    model: Union[Discriminator, DiscriminatorEnsemble], batch: torch.Tensor
) -> Union[torch.Tensor, List[torch.Tensor]]:
    """Raw pre-softmax features; one tensor per member for an ensemble."""
    _check_batch(batch, model.in_channels)
    if isinstance(model, DiscriminatorEnsemble):
        return [m.features(batch) for m in model.members]
    return model.features(batch)
