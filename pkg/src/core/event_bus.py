"""
src/core/event_bus.py
事件总线 - 同步的发布/订阅

训练循环只负责发布事件；指标写入、检查点保存都作为订阅者挂接。
订阅者按注册顺序调用，异常记录后向发布方抛出，训练不会在写盘失败后继续。
"""

import logging
import threading
from collections import defaultdict
from enum import Enum
from typing import Any, Callable, DefaultDict, List

logger = logging.getLogger(__name__)

Handler = Callable[[Any], None]


class EventType(str, Enum):
    """事件类型"""
    APPLICATION_INITIALIZED = "application.initialized"
    COMMAND_STARTED = "command.started"
    COMMAND_FINISHED = "command.finished"

    TRAIN_STARTED = "train.started"
    ITERATION_COMPLETED = "train.iteration_completed"   # 载荷：一行指标
    CHECKPOINT_DUE = "train.checkpoint_due"             # 载荷：TrainingService
    TRAIN_FINISHED = "train.finished"

    ANALYSIS_COMPLETED = "eval.analysis_completed"      # 载荷：{"analysis": 名称, **摘要}


class EventBus:

    def __init__(self):
        self._handlers: DefaultDict[EventType, List[Handler]] = defaultdict(list)
        self._lock = threading.RLock()

    def subscribe(self, event_type: EventType, handler: Handler) -> None:
        with self._lock:
            if handler not in self._handlers[event_type]:
                self._handlers[event_type].append(handler)

    def unsubscribe(self, event_type: EventType, handler: Handler) -> None:
        with self._lock:
            handlers = self._handlers.get(event_type, [])
            if handler in handlers:
                handlers.remove(handler)

    def publish(self, event_type: EventType, data: Any = None) -> None:
        with self._lock:
            handlers = list(self._handlers.get(event_type, ()))
        for handler in handlers:
            try:
                handler(data)
            except Exception as e:
                logger.error(f"事件 {event_type.value} 的订阅者 {getattr(handler, '__qualname__', handler)} 失败: {e}")
                raise

    def clear_subscriptions(self) -> None:
        with self._lock:
            self._handlers.clear()


_event_bus_instance = None


def get_event_bus() -> EventBus:
    """获取事件总线单例"""
    global _event_bus_instance
    if _event_bus_instance is None:
        _event_bus_instance = EventBus()
    return _event_bus_instance
