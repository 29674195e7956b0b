"""
自定义异常定义
"""


class VitcaError(Exception):
    """异常基类"""
    pass


class DimensionError(VitcaError):
    """形状/维度不匹配"""
    pass


class IndexRangeError(VitcaError, IndexError):
    """索引越界"""
    pass


class ContractError(VitcaError):
    """前置条件不满足"""
    pass


class ConfigError(VitcaError, ValueError):
    """配置错误：未知键、类型不匹配或取值越界"""
    pass


class DataFormatError(VitcaError):
    """数据文件格式错误 (带字节偏移)"""

    def __init__(self, message: str, offset: int = None, path: str = None):
        location = []
        if path is not None:
            location.append(str(path))
        if offset is not None:
            location.append(f"offset {offset}")
        prefix = f"[{', '.join(location)}] " if location else ""
        super().__init__(prefix + message)
        self.offset = offset
        self.path = path


class DivergenceError(VitcaError):
    """细胞状态发散 (非有限值或超出界限)"""
    pass


class ServiceError(VitcaError):
    """服务层异常基类"""
    pass


class LoggingError(ServiceError):
    """日志服务异常"""
    pass
