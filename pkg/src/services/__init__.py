"""
服务层 - 有生命周期的组件 (运行目录、检查点) 的共同约定

服务由控制器注册到 ServiceManager 后启动，结束时逆序停止：
检查点服务先于数据服务停止，清单写出时最后一个检查点已落盘。
"""

from abc import ABC, abstractmethod
from enum import Enum
from typing import Dict, TypeVar

from src.common.exceptions import ServiceError


class ServiceStatus(Enum):
    STOPPED = "stopped"
    STARTING = "starting"
    RUNNING = "running"
    STOPPING = "stopping"
    ERROR = "error"


class BaseService(ABC):
    """服务基类"""

    def __init__(self, name: str):
        self.name = name
        self.status = ServiceStatus.STOPPED

    @abstractmethod
    def start(self) -> bool:
        ...

    @abstractmethod
    def stop(self) -> bool:
        ...


S = TypeVar("S", bound=BaseService)


class ServiceManager:

    def __init__(self):
        self._services: Dict[str, BaseService] = {}

    def register_service(self, name: str, service: S) -> S:
        if name in self._services:
            raise ServiceError(f"服务 {name} 已注册")
        self._services[name] = service
        return service

    def stop_all(self) -> bool:
        """逆序停止；已停止的服务跳过"""
        results = [service.stop() for service in reversed(list(self._services.values()))
                   if service.status is not ServiceStatus.STOPPED]
        return all(results)

    def clear(self) -> None:
        self._services.clear()


__all__ = [
    'BaseService',
    'ServiceStatus',
    'ServiceError',
    'ServiceManager',
]
