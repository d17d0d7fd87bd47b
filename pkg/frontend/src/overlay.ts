/** Detection overlays: boxes live in image coordinates and are mapped
 * through the displayed scale, so hit-testing stays correct however the
 * layout resizes the image. */

import { DetectionState } from "./types";

export interface DisplayScale {
  sx: number;
  sy: number;
}

export function displayScale(
  imageW: number,
  imageH: number,
  canvas: HTMLCanvasElement,
): DisplayScale {
  return { sx: canvas.width / imageW, sy: canvas.height / imageH };
}

/** Translate a canvas click into image coordinates. */
export function toImageCoords(
  ev: { offsetX: number; offsetY: number },
  scale: DisplayScale,
): { x: number; y: number } {
  return { x: ev.offsetX / scale.sx, y: ev.offsetY / scale.sy };
}

export function drawDetections(
  canvas: HTMLCanvasElement,
  detections: DetectionState[],
  scale: DisplayScale,
): void {
  const ctx = canvas.getContext("2d");
  if (!ctx) return;
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  for (const det of detections) {
    ctx.lineWidth = det.selected ? 3 : 2;
    ctx.strokeStyle = det.selected ? "#ffb300" : "#27c24c";
    ctx.strokeRect(
      det.box.x * scale.sx,
      det.box.y * scale.sy,
      det.box.w * scale.sx,
      det.box.h * scale.sy,
    );
  }
}
