"""
自定义异常类

定义项目中使用的所有异常类型，提供更好的错误处理和调试体验。
"""
from typing import Optional


class GraftNetError(Exception):
    """项目基础异常类"""

    def __init__(self, message: str, details: Optional[str] = None):
        self.message = message
        self.details = details
        super().__init__(self.format_message())

    def format_message(self) -> str:
        """格式化错误消息"""
        if self.details:
            return f"{self.message}: {self.details}"
        return self.message


class ConfigError(GraftNetError):
    """配置异常"""

    def __init__(self, message: str, config_key: Optional[str] = None):
        details = f"key={config_key}" if config_key else None
        super().__init__(message, details)
        self.config_key = config_key


class LayerConfigError(ConfigError):
    """网络层形状或结构配置错误（指明出错的层）"""

    def __init__(self, message: str, layer: str):
        super().__init__(f"{message} (层: {layer})", config_key=layer)
        self.layer = layer


class ValidationError(GraftNetError):
    """输入验证异常（参数错误）"""

    def __init__(self, message: str, field: Optional[str] = None, value=None):
        details = f"{field}={value}" if field else None
        super().__init__(message, details)
        self.field = field
        self.value = value


class NetworkStateError(GraftNetError):
    """网络状态异常，例如在 forward 之前调用 backward"""


class DatasetError(GraftNetError):
    """数据集内容异常"""

    def __init__(self, message: str, path: Optional[str] = None):
        details = f"path={path}" if path else None
        super().__init__(message, details)
        self.path = path


class DatasetParseError(DatasetError):
    """数据文件解析异常"""

    def __init__(self, message: str, line_number: int, path: Optional[str] = None):
        super().__init__(f"第 {line_number} 行: {message}", path=path)
        self.line_number = line_number


class CheckpointError(GraftNetError):
    """检查点读写异常"""

    def __init__(self, message: str, path: Optional[str] = None):
        details = f"checkpoint={path}" if path else None
        super().__init__(message, details)
        self.path = path


class ExportError(GraftNetError):
    """导出异常"""

    def __init__(self, message: str, output_path: Optional[str] = None):
        details = f"output={output_path}" if output_path else None
        super().__init__(message, details)
        self.output_path = output_path


class ProtocolError(GraftNetError):
    """嫁接屏障协议异常（说明屏障实现有缺陷）"""


class TrainingError(GraftNetError):
    """训练器失败，实验被中止"""

    def __init__(
        self,
        message: str,
        network_id: Optional[int] = None,
        original_error: Optional[Exception] = None
    ):
        self.network_id = network_id
        self.original_error = original_error
        details = f"network={network_id}" if network_id is not None else None
        if original_error:
            original = f"original={type(original_error).__name__}: {original_error}"
            details = f"{details}, {original}" if details else original
        super().__init__(message, details)
