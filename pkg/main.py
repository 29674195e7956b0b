# main.py
import sys

from src.common.constants import LogCategory
from src.core.application import create_application
from src.services.logging_service import get_logging_service


def main(argv=None):
    """主函数"""
    logger = get_logging_service()

    try:
        app = create_application(argv)
        exit_code = app.run()
        app.shutdown()
        logger.info(f"命令已退出，退出码: {exit_code}", LogCategory.SYSTEM)
        return exit_code

    except Exception as e:
        logger.critical(f"应用程序发生未捕获异常: {e}", LogCategory.SYSTEM)
        return 1


if __name__ == '__main__':
    sys.exit(main())
