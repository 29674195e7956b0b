"""
ViTCA 细胞自动机引擎 - 主程序包

包含自动微分引擎、更新规则模型、训练与评估服务以及命令行控制器。
"""

import os
import sys
from pathlib import Path

from src.common.constants import RUN_ROOT_ENV

# 添加项目根目录到Python路径
_project_root = Path(__file__).parent.parent
if str(_project_root) not in sys.path:
    sys.path.insert(0, str(_project_root))

# 版本信息
__version__ = "1.0.0"
__description__ = "ViTCA 注意力细胞自动机引擎"


class ProjectConfig:
    """项目路径配置"""

    ROOT_DIR = _project_root

    @classmethod
    def run_root(cls) -> Path:
        """运行根目录：环境变量优先，默认 ./runs"""
        return Path(os.environ.get(RUN_ROOT_ENV, "runs"))


def get_version():
    """获取版本信息"""
    return __version__


__all__ = [
    'ProjectConfig', 'get_version'
]
