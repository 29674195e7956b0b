"""
日志服务模块

控制台输出经 tqdm.write 转发，训练进度条不会被日志行打断；
打开运行目录后追加一个滚动文件处理器，写到 <run>/logs/<command>.log。
"""

import logging
import logging.handlers
from collections import Counter
from pathlib import Path
from typing import Dict, Optional, Union

from tqdm import tqdm

from src.common.constants import LogCategory, LogLevel
from src.common.exceptions import LoggingError

LOGGER_NAME = "vitca"
LOG_FORMAT = "%(asctime)s - %(levelname)s - %(message)s"


class TqdmConsoleHandler(logging.Handler):
    """把记录写到 tqdm 的输出通道，与活动中的进度条共存"""

    def emit(self, record: logging.LogRecord) -> None:
        try:
            tqdm.write(self.format(record))
        except Exception:
            self.handleError(record)


class LevelCounter(logging.Handler):
    """按级别累计记录数，写入运行清单"""

    def __init__(self):
        super().__init__(logging.DEBUG)
        self.counts: Counter = Counter()

    def emit(self, record: logging.LogRecord) -> None:
        self.counts[record.levelname] += 1


class LoggingService:
    """
    统一日志入口：每条消息带 [类别] 前缀

    控制台级别由 engine.log_level 决定，文件始终记录 DEBUG 及以上。
    """

    def __init__(self, max_file_size: int = 10 * 1024 * 1024, backup_count: int = 3):
        self.max_file_size = max_file_size
        self.backup_count = backup_count
        self.log_file: Optional[Path] = None
        self._formatter = logging.Formatter(LOG_FORMAT)
        self._file_handler: Optional[logging.Handler] = None

        self.logger = logging.getLogger(LOGGER_NAME)
        self.logger.setLevel(logging.DEBUG)
        self.logger.propagate = False
        for handler in list(self.logger.handlers):
            self.logger.removeHandler(handler)

        self._console = TqdmConsoleHandler(logging.INFO)
        self._console.setFormatter(self._formatter)
        self._counter = LevelCounter()
        self.logger.addHandler(self._console)
        self.logger.addHandler(self._counter)

        logging.getLogger("matplotlib").setLevel(logging.WARNING)
        logging.getLogger("PIL").setLevel(logging.WARNING)

    def bind_run_directory(self, run_dir: Union[str, Path], command: str = "run") -> Path:
        """
        文件日志改写到新的运行目录；同一进程内依次执行多个命令时旧文件处理器被关闭

        Raises:
            LoggingError: 日志文件无法创建
        """
        log_file = Path(run_dir) / "logs" / f"{command}.log"
        self.release_file()
        try:
            log_file.parent.mkdir(parents=True, exist_ok=True)
            handler = logging.handlers.RotatingFileHandler(
                log_file, maxBytes=self.max_file_size, backupCount=self.backup_count, encoding="utf-8")
        except OSError as e:
            raise LoggingError(f"无法创建日志文件 {log_file}: {e}")
        handler.setFormatter(self._formatter)
        handler.setLevel(logging.DEBUG)
        self.logger.addHandler(handler)
        self._file_handler = handler
        self.log_file = log_file
        self._counter.counts.clear()
        return log_file

    def release_file(self) -> None:
        if self._file_handler is not None:
            self.logger.removeHandler(self._file_handler)
            self._file_handler.close()
            self._file_handler = None

    def log(self, message: str, level: LogLevel = LogLevel.INFO,
            category: Union[str, LogCategory] = LogCategory.SYSTEM) -> None:
        self.logger.log(getattr(logging, level.value), "[%s] %s", category, message)

    def debug(self, message: str, category: Union[str, LogCategory] = LogCategory.SYSTEM):
        self.log(message, LogLevel.DEBUG, category)

    def info(self, message: str, category: Union[str, LogCategory] = LogCategory.SYSTEM):
        self.log(message, LogLevel.INFO, category)

    def warning(self, message: str, category: Union[str, LogCategory] = LogCategory.SYSTEM):
        self.log(message, LogLevel.WARNING, category)

    def error(self, message: str, category: Union[str, LogCategory] = LogCategory.SYSTEM):
        self.log(message, LogLevel.ERROR, category)

    def critical(self, message: str, category: Union[str, LogCategory] = LogCategory.SYSTEM):
        self.log(message, LogLevel.CRITICAL, category)

    def set_log_level(self, level: LogLevel) -> None:
        """只调整控制台级别"""
        self._console.setLevel(getattr(logging, level.value))

    def get_log_statistics(self) -> Dict[str, int]:
        """自上次绑定运行目录以来各级别的记录数"""
        return {level.value: self._counter.counts.get(level.value, 0) for level in LogLevel}


_logging_service_instance: Optional[LoggingService] = None


def get_logging_service() -> LoggingService:
    """获取日志服务单例"""
    global _logging_service_instance
    if _logging_service_instance is None:
        _logging_service_instance = LoggingService()
    return _logging_service_instance
