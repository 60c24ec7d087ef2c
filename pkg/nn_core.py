"""
神经网络核心模块

以 numpy float64 数组作为张量，实现一个小型、确定性的卷积网络引擎：
卷积 / 全连接 / ReLU / 最大池化 / 展平层，softmax 交叉熵，
以及按 "layer{i}.weight" / "layer{i}.bias" 命名的参数视图。
"""
import copy
from collections import OrderedDict
from dataclasses import dataclass
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from exceptions import LayerConfigError, NetworkStateError, ValidationError


DTYPE = np.float64

# name -> tensor，顺序与网络层顺序一致
ParameterDict = Dict[str, np.ndarray]


@dataclass
class ConvLayerWeights:
    """
    卷积层权重 W_i，形状为 [N_out, N_in, K, K]

    第 j 个滤波器是切片 tensor[j]。tensor 通常是网络参数的视图，
    对滤波器的原地修改会直接作用到网络上。
    """
    tensor: np.ndarray
    layer_index: int
    name: str = ""

    def __post_init__(self):
        if self.tensor.ndim != 4:
            raise ValidationError("卷积权重必须是 4 维张量", field="tensor.ndim", value=self.tensor.ndim)
        if min(self.tensor.shape) < 1:
            raise ValidationError("卷积权重的各维度必须 >= 1", field="tensor.shape", value=self.tensor.shape)
        if not self.name:
            self.name = f"layer{self.layer_index}.weight"

    @property
    def num_filters(self) -> int:
        return self.tensor.shape[0]

    @property
    def kernel_size(self) -> int:
        return self.tensor.shape[2]

    def filter(self, j: int) -> np.ndarray:
        """返回第 j 个滤波器（视图）"""
        return self.tensor[j]


class Layer:
    """网络层基类"""

    kind = "layer"

    def __init__(self, name: str):
        self.name = name
        self._cache: Any = None

    def output_shape(self, input_shape: Tuple[int, ...]) -> Tuple[int, ...]:
        return input_shape

    def forward(self, x: np.ndarray, cache: bool = True) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def parameters(self) -> Dict[str, np.ndarray]:
        return {}

    def gradients(self) -> Dict[str, np.ndarray]:
        return {}

    def signature(self) -> Optional[np.ndarray]:
        """最近一次前向传播中不可微点的选择（ReLU 掩码 / 池化位置）"""
        return None

    def _require_cache(self) -> Any:
        if self._cache is None:
            raise NetworkStateError(f"{self.name} 在 forward 之前调用了 backward")
        return self._cache


class Conv2D(Layer):
    """二维卷积层（方形卷积核，零填充）"""

    kind = "conv"

    def __init__(
        self,
        name: str,
        in_channels: int,
        out_channels: int,
        kernel_size: int,
        stride: int = 1,
        padding: int = 0
    ):
        super().__init__(name)
        if min(in_channels, out_channels, kernel_size, stride) < 1 or padding < 0:
            raise LayerConfigError("卷积层参数无效", layer=name)
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = padding
        self.weight = np.zeros((out_channels, in_channels, kernel_size, kernel_size), dtype=DTYPE)
        self.bias = np.zeros(out_channels, dtype=DTYPE)
        self.grad_weight = np.zeros_like(self.weight)
        self.grad_bias = np.zeros_like(self.bias)

    @property
    def fan_in(self) -> int:
        return self.in_channels * self.kernel_size * self.kernel_size

    def output_shape(self, input_shape: Tuple[int, ...]) -> Tuple[int, ...]:
        if len(input_shape) != 3 or input_shape[0] != self.in_channels:
            raise LayerConfigError(
                f"输入形状 {tuple(input_shape)} 与卷积层输入通道 {self.in_channels} 不匹配",
                layer=self.name
            )
        _, h, w = input_shape
        out_h = (h + 2 * self.padding - self.kernel_size) // self.stride + 1
        out_w = (w + 2 * self.padding - self.kernel_size) // self.stride + 1
        if out_h < 1 or out_w < 1:
            raise LayerConfigError(f"输入尺寸 {h}x{w} 小于卷积核", layer=self.name)
        return (self.out_channels, out_h, out_w)

    def _windows(self, out_h: int, out_w: int):
        """遍历卷积核偏移 (p, q) 及其在填充输入上的切片"""
        s = self.stride
        for p in range(self.kernel_size):
            for q in range(self.kernel_size):
                window = (
                    slice(None),
                    slice(None),
                    slice(p, p + s * (out_h - 1) + 1, s),
                    slice(q, q + s * (out_w - 1) + 1, s),
                )
                yield p, q, window

    def forward(self, x: np.ndarray, cache: bool = True) -> np.ndarray:
        if x.ndim != 4:
            raise LayerConfigError(f"卷积层需要 4 维输入，得到 {x.ndim} 维", layer=self.name)
        _, out_h, out_w = self.output_shape(x.shape[1:])
        pad = self.padding
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x

        out = np.zeros((x.shape[0], self.out_channels, out_h, out_w), dtype=DTYPE)
        for p, q, window in self._windows(out_h, out_w):
            out += np.einsum('nchw,oc->nohw', xp[window], self.weight[:, :, p, q])
        out += self.bias[None, :, None, None]

        if cache:
            self._cache = (xp, x.shape)
        return out

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        xp, x_shape = self._require_cache()
        out_h, out_w = grad_out.shape[2], grad_out.shape[3]
        dxp = np.zeros_like(xp)
        for p, q, window in self._windows(out_h, out_w):
            self.grad_weight[:, :, p, q] = np.einsum('nohw,nchw->oc', grad_out, xp[window])
            dxp[window] += np.einsum('nohw,oc->nchw', grad_out, self.weight[:, :, p, q])
        self.grad_bias[...] = grad_out.sum(axis=(0, 2, 3))

        pad = self.padding
        if pad:
            return dxp[:, :, pad:pad + x_shape[2], pad:pad + x_shape[3]]
        return dxp

    def parameters(self) -> Dict[str, np.ndarray]:
        return {"weight": self.weight, "bias": self.bias}

    def gradients(self) -> Dict[str, np.ndarray]:
        return {"weight": self.grad_weight, "bias": self.grad_bias}


class Dense(Layer):
    """全连接层 y = x W^T + b"""

    kind = "dense"

    def __init__(self, name: str, in_features: int, out_features: int):
        super().__init__(name)
        if min(in_features, out_features) < 1:
            raise LayerConfigError("全连接层参数无效", layer=name)
        self.in_features = in_features
        self.out_features = out_features
        self.weight = np.zeros((out_features, in_features), dtype=DTYPE)
        self.bias = np.zeros(out_features, dtype=DTYPE)
        self.grad_weight = np.zeros_like(self.weight)
        self.grad_bias = np.zeros_like(self.bias)

    @property
    def fan_in(self) -> int:
        return self.in_features

    def output_shape(self, input_shape: Tuple[int, ...]) -> Tuple[int, ...]:
        if tuple(input_shape) != (self.in_features,):
            raise LayerConfigError(
                f"输入形状 {tuple(input_shape)} 与全连接层输入维度 {self.in_features} 不匹配",
                layer=self.name
            )
        return (self.out_features,)

    def forward(self, x: np.ndarray, cache: bool = True) -> np.ndarray:
        if x.ndim != 2:
            raise LayerConfigError(f"全连接层需要 2 维输入，得到 {x.ndim} 维", layer=self.name)
        self.output_shape(x.shape[1:])
        if cache:
            self._cache = x
        return x @ self.weight.T + self.bias

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        x = self._require_cache()
        self.grad_weight[...] = grad_out.T @ x
        self.grad_bias[...] = grad_out.sum(axis=0)
        return grad_out @ self.weight

    def parameters(self) -> Dict[str, np.ndarray]:
        return {"weight": self.weight, "bias": self.bias}

    def gradients(self) -> Dict[str, np.ndarray]:
        return {"weight": self.grad_weight, "bias": self.grad_bias}


class ReLU(Layer):
    kind = "relu"

    def forward(self, x: np.ndarray, cache: bool = True) -> np.ndarray:
        mask = x > 0
        if cache:
            self._cache = mask
        return np.where(mask, x, 0.0)

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        mask = self._require_cache()
        return np.where(mask, grad_out, 0.0)

    def signature(self) -> Optional[np.ndarray]:
        return self._cache


class MaxPool2D(Layer):
    """不重叠的 size x size 最大池化；并列最大值取窗口内第一个位置"""

    kind = "maxpool"

    def __init__(self, name: str, size: int = 2):
        super().__init__(name)
        if size < 1:
            raise LayerConfigError("池化尺寸必须 >= 1", layer=name)
        self.size = size

    def output_shape(self, input_shape: Tuple[int, ...]) -> Tuple[int, ...]:
        if len(input_shape) != 3:
            raise LayerConfigError(f"池化层需要 (C, H, W) 输入，得到 {tuple(input_shape)}", layer=self.name)
        c, h, w = input_shape
        if h % self.size or w % self.size:
            raise LayerConfigError(f"输入尺寸 {h}x{w} 不能被池化尺寸 {self.size} 整除", layer=self.name)
        return (c, h // self.size, w // self.size)

    def forward(self, x: np.ndarray, cache: bool = True) -> np.ndarray:
        if x.ndim != 4:
            raise LayerConfigError(f"池化层需要 4 维输入，得到 {x.ndim} 维", layer=self.name)
        c, out_h, out_w = self.output_shape(x.shape[1:])
        s = self.size
        n = x.shape[0]
        windows = (
            x.reshape(n, c, out_h, s, out_w, s)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(n, c, out_h, out_w, s * s)
        )
        argmax = windows.argmax(axis=-1)
        if cache:
            self._cache = (argmax, x.shape)
        return np.take_along_axis(windows, argmax[..., None], axis=-1)[..., 0]

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        argmax, x_shape = self._require_cache()
        n, c, h, w = x_shape
        s = self.size
        routed = np.zeros(argmax.shape + (s * s,), dtype=DTYPE)
        np.put_along_axis(routed, argmax[..., None], grad_out[..., None], axis=-1)
        return (
            routed.reshape(n, c, h // s, w // s, s, s)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(x_shape)
        )

    def signature(self) -> Optional[np.ndarray]:
        return None if self._cache is None else self._cache[0]


class Flatten(Layer):
    kind = "flatten"

    def output_shape(self, input_shape: Tuple[int, ...]) -> Tuple[int, ...]:
        return (int(np.prod(input_shape)),)

    def forward(self, x: np.ndarray, cache: bool = True) -> np.ndarray:
        if cache:
            self._cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        return grad_out.reshape(self._require_cache())


def small_convnet(
    input_shape: Sequence[int] = (1, 8, 8),
    num_classes: int = 4,
    channels: Sequence[int] = (8, 16),
    kernel_size: int = 3
) -> Dict[str, Any]:
    """conv -> relu -> pool 块堆叠加全连接头的网络结构描述"""
    layers: List[Dict[str, Any]] = []
    for out_channels in channels:
        layers.append({"type": "conv", "out_channels": out_channels,
                       "kernel_size": kernel_size, "padding": kernel_size // 2})
        layers.append({"type": "relu"})
        layers.append({"type": "maxpool", "size": 2})
    layers.append({"type": "flatten"})
    layers.append({"type": "dense", "out_features": num_classes})
    return {"input_shape": list(input_shape), "num_classes": num_classes, "layers": layers}


class Network:
    """
    按结构描述构建的有序层序列

    结构描述是可 JSON 序列化的字典：
        {"input_shape": [C, H, W], "num_classes": K,
         "layers": [{"type": "conv", "out_channels": 8, "kernel_size": 3, "padding": 1},
                    {"type": "relu"}, {"type": "maxpool", "size": 2},
                    {"type": "flatten"}, {"type": "dense", "out_features": K}]}

    同一结构描述构建的两个网络拥有完全相同的参数名、形状和顺序。
    """

    INIT_MODES = ("he", "zeros")

    def __init__(self, architecture: Mapping[str, Any], seed: int = 0, init: str = "he"):
        self.architecture = copy.deepcopy(dict(architecture))
        try:
            self.input_shape = tuple(int(d) for d in self.architecture["input_shape"])
            layer_specs = list(self.architecture["layers"])
        except (KeyError, TypeError, ValueError):
            raise LayerConfigError("结构描述缺少 input_shape 或 layers", layer="architecture")
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise LayerConfigError(f"input_shape 必须是 [C, H, W]，得到 {self.input_shape}", layer="input")

        self.layers: List[Layer] = []
        shape: Tuple[int, ...] = self.input_shape
        for i, spec in enumerate(layer_specs):
            layer = self._build_layer(i, spec, shape)
            shape = layer.output_shape(shape)
            self.layers.append(layer)

        if len(shape) != 1:
            raise LayerConfigError(f"网络输出必须是一维 logits，得到形状 {shape}", layer=f"layer{len(layer_specs) - 1}")
        declared = self.architecture.get("num_classes")
        if declared is not None and int(declared) != shape[0]:
            raise LayerConfigError(f"输出维度 {shape[0]} 与 num_classes={declared} 不一致", layer=f"layer{len(layer_specs) - 1}")
        self.num_classes = shape[0]

        self._forward_done = False
        self.initialize(seed, init)

    @staticmethod
    def _build_layer(index: int, spec: Mapping[str, Any], input_shape: Tuple[int, ...]) -> Layer:
        name = f"layer{index}"
        kind = str(spec.get("type", "")).lower()
        try:
            if kind == "conv":
                if len(input_shape) != 3:
                    raise LayerConfigError("卷积层必须位于展平层之前", layer=name)
                return Conv2D(
                    name,
                    in_channels=input_shape[0],
                    out_channels=int(spec["out_channels"]),
                    kernel_size=int(spec.get("kernel_size", 3)),
                    stride=int(spec.get("stride", 1)),
                    padding=int(spec.get("padding", 0)),
                )
            if kind == "dense":
                if len(input_shape) != 1:
                    raise LayerConfigError("全连接层之前需要展平层", layer=name)
                return Dense(name, in_features=input_shape[0], out_features=int(spec["out_features"]))
            if kind == "relu":
                return ReLU(name)
            if kind == "maxpool":
                return MaxPool2D(name, size=int(spec.get("size", 2)))
            if kind == "flatten":
                return Flatten(name)
        except KeyError as e:
            raise LayerConfigError(f"缺少层参数 {e}", layer=name)
        raise LayerConfigError(f"未知的层类型: {kind!r}", layer=name)

    # ------------------------------------------------------------------
    # 参数
    # ------------------------------------------------------------------

    def initialize(self, seed: int = 0, init: str = "he") -> None:
        """He 高斯初始化（按 fan-in 缩放，偏置为 0）或全零初始化"""
        if init not in self.INIT_MODES:
            raise ValidationError(f"未知的初始化方式: {init}", field="init", value=init)
        rng = np.random.default_rng(seed)
        for layer in self.layers:
            if not isinstance(layer, (Conv2D, Dense)):
                continue
            if init == "he":
                layer.weight[...] = rng.standard_normal(layer.weight.shape) * np.sqrt(2.0 / layer.fan_in)
            else:
                layer.weight[...] = 0.0
            layer.bias[...] = 0.0

    def parameters(self) -> ParameterDict:
        """有序的参数视图（张量本身，修改会作用到网络上）"""
        params: ParameterDict = OrderedDict()
        for layer in self.layers:
            for kind, tensor in layer.parameters().items():
                params[f"{layer.name}.{kind}"] = tensor
        return params

    def gradients(self) -> ParameterDict:
        grads: ParameterDict = OrderedDict()
        for layer in self.layers:
            for kind, tensor in layer.gradients().items():
                grads[f"{layer.name}.{kind}"] = tensor
        return grads

    def snapshot(self) -> ParameterDict:
        """参数的深拷贝"""
        return OrderedDict((name, tensor.copy()) for name, tensor in self.parameters().items())

    def load_parameters(self, values: Mapping[str, np.ndarray]) -> None:
        """原地写入参数；名称和形状必须与本网络完全一致"""
        params = self.parameters()
        if list(values.keys()) != list(params.keys()):
            missing = set(params) ^ set(values)
            raise LayerConfigError(f"参数名不一致: {sorted(missing)}", layer="parameters")
        for name, tensor in params.items():
            source = np.asarray(values[name], dtype=DTYPE)
            if source.shape != tensor.shape:
                raise LayerConfigError(f"参数形状不一致: {source.shape} != {tensor.shape}", layer=name)
            tensor[...] = source

    def copy(self) -> "Network":
        clone = Network(self.architecture, init="zeros")
        clone.load_parameters(self.parameters())
        return clone

    def conv_layers(self) -> List[ConvLayerWeights]:
        return [
            ConvLayerWeights(layer.weight, layer_index=i, name=f"{layer.name}.weight")
            for i, layer in enumerate(self.layers)
            if isinstance(layer, Conv2D)
        ]

    def num_parameters(self) -> int:
        return int(sum(t.size for t in self.parameters().values()))

    # ------------------------------------------------------------------
    # 前向 / 反向
    # ------------------------------------------------------------------

    def _check_batch(self, batch: np.ndarray) -> None:
        if batch.ndim != 4 or tuple(batch.shape[1:]) != self.input_shape:
            raise LayerConfigError(
                f"输入批次形状 {tuple(batch.shape)} 与网络输入 {self.input_shape} 不匹配",
                layer="input"
            )

    def forward(self, batch: np.ndarray) -> np.ndarray:
        """前向传播，返回 logits [N, K]，并缓存中间结果供 backward 使用"""
        self._check_batch(batch)
        out = np.asarray(batch, dtype=DTYPE)
        for layer in self.layers:
            out = layer.forward(out, cache=True)
        self._forward_done = True
        return out

    def predict(self, batch: np.ndarray) -> np.ndarray:
        """推理前向传播，不写任何缓存，可被多个线程同时调用"""
        self._check_batch(batch)
        out = np.asarray(batch, dtype=DTYPE)
        for layer in self.layers:
            out = layer.forward(out, cache=False)
        return out

    def backward(self, logit_grads: np.ndarray) -> ParameterDict:
        """
        反向传播

        Args:
            logit_grads: 损失对 logits 的梯度 [N, K]

        Returns:
            与 parameters() 同构的梯度视图
        """
        if not self._forward_done:
            raise NetworkStateError("在 forward 之前调用了 backward")
        grad = np.asarray(logit_grads, dtype=DTYPE)
        if grad.ndim != 2 or grad.shape[1] != self.num_classes:
            raise LayerConfigError(f"logits 梯度形状 {grad.shape} 无效", layer="output")
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return self.gradients()

    def activation_signature(self) -> List[np.ndarray]:
        return [sig for sig in (layer.signature() for layer in self.layers) if sig is not None]


# ----------------------------------------------------------------------
# 损失
# ----------------------------------------------------------------------

def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = np.exp(logits - logits.max(axis=1, keepdims=True))
    return shifted / shifted.sum(axis=1, keepdims=True)


def _check_labels(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    if logits.ndim != 2:
        raise ValidationError("logits 必须是 [N, K]", field="logits.shape", value=logits.shape)
    if logits.shape[0] == 0:
        raise ValidationError("批次为空", field="batch_size", value=0)
    labels = np.asarray(labels)
    if labels.shape != (logits.shape[0],):
        raise ValidationError("标签数量与批次大小不一致", field="labels.shape", value=labels.shape)
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ValidationError("标签超出范围", field="labels", value=(int(labels.min()), int(labels.max())))
    return labels.astype(np.int64)


def cross_entropy_loss(logits: np.ndarray, labels: np.ndarray) -> float:
    """softmax 交叉熵，按批次取均值"""
    labels = _check_labels(logits, labels)
    log_probs = log_softmax(logits)
    return float(-log_probs[np.arange(labels.size), labels].mean())


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> Tuple[float, np.ndarray]:
    """返回 (均值交叉熵, 对 logits 的梯度)"""
    labels = _check_labels(logits, labels)
    n = labels.size
    log_probs = log_softmax(logits)
    loss = float(-log_probs[np.arange(n), labels].mean())
    grad = np.exp(log_probs)
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n
