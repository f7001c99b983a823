"""
流水线进度通知模块
定义阶段事件，以及安全投递这些事件的进度报告器
"""

import inspect
import logging
from typing import Any, Awaitable, Callable, Literal, Optional, Union

import anyio
from pydantic import BaseModel, ConfigDict, Field

logger = logging.getLogger(__name__)

StageStatus = Literal["started", "completed", "loaded", "failed"]


class StageEvent(BaseModel):
    model_config = ConfigDict(frozen=True)

    stage: str
    status: StageStatus
    elapsed: float = Field(default=0.0, ge=0.0)
    detail: str = ""


ProgressCallback = Callable[[StageEvent], Union[None, Awaitable[None]]]


class ProgressReporter:
    """进度报告器，处理事件投递的生命周期和错误"""

    def __init__(self, callback: Optional[ProgressCallback] = None):
        self.callback = callback
        self.events: list[StageEvent] = []
        self._closed = False
        self._debug_id = id(self)
        logger.debug(f"Creating ProgressReporter {self._debug_id}")

    @property
    def is_closed(self) -> bool:
        return self._closed

    async def close(self):
        logger.debug(f"Closing ProgressReporter {self._debug_id}")
        self._closed = True

    async def notify(self, event: StageEvent, *, shield: bool = True) -> bool:
        """
        安全地投递事件，捕获并记录回调中的任何错误

        Args:
            event: 阶段事件
            shield: 是否保护投递免受取消影响

        Returns:
            bool: 事件是否成功投递
        """
        if self.is_closed:
            logger.debug(f"ProgressReporter {self._debug_id} is closed, dropping event: {event}")
            return False

        self.events.append(event)
        log = logger.warning if event.status == "failed" else logger.info
        log(f"Stage {event.stage} {event.status} ({event.elapsed:.2f}s){': ' + event.detail if event.detail else ''}")
        if self.callback is None:
            return True

        async def _send() -> bool:
            try:
                result: Any = self.callback(event)
                if inspect.isawaitable(result):
                    await result
                return True
            except Exception as e:
                logger.error(f"ProgressReporter {self._debug_id} callback failed: {e}", exc_info=True)
                return False

        if shield:
            with anyio.CancelScope(shield=True):
                return await _send()
        return await _send()

    async def __aenter__(self):
        return self

    async def __aexit__(self, exc_type, exc_val, exc_tb):
        logger.debug(f"Exiting ProgressReporter {self._debug_id} context: exc_type={exc_type}")
        await self.close()
