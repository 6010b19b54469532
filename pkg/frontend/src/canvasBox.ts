import type { Bbox } from './types'

/** A mouse drag in displayed (canvas) coordinates. */
export interface DragRect {
  startX: number
  startY: number
  endX: number
  endY: number
}

/** An axis-aligned rectangle in displayed coordinates. */
export interface DisplayRect {
  left: number
  top: number
  width: number
  height: number
}

/**
 * Map a drag to an image-space COCO bbox.
 *
 * `scale` is displayed-pixels per image-pixel (0.5 means the image is
 * shown at half size, so drawn coordinates are doubled). Returns null for
 * a zero-area drag so callers can show inline validation instead of
 * posting.
 */
export function dragToImageBox(drag: DragRect, scale: number): Bbox | null {
  if (scale <= 0) throw new RangeError(`scale must be positive, got ${scale}`)
  const left = Math.min(drag.startX, drag.endX)
  const top = Math.min(drag.startY, drag.endY)
  const width = Math.abs(drag.endX - drag.startX)
  const height = Math.abs(drag.endY - drag.startY)
  if (width === 0 || height === 0) return null
  return [
    Math.round(left / scale),
    Math.round(top / scale),
    Math.round(width / scale),
    Math.round(height / scale),
  ]
}

/** Inverse mapping used when re-rendering a fetched annotation. */
export function imageBoxToDisplay(bbox: Bbox, scale: number): DisplayRect {
  const [x, y, w, h] = bbox
  return { left: x * scale, top: y * scale, width: w * scale, height: h * scale }
}

/** Clamp an image-space bbox to the scene bounds. */
export function clampToImage(bbox: Bbox, imageWidth: number, imageHeight: number): Bbox {
  const [x, y, w, h] = bbox
  const x0 = Math.min(Math.max(x, 0), imageWidth)
  const y0 = Math.min(Math.max(y, 0), imageHeight)
  const x1 = Math.min(Math.max(x + w, x0), imageWidth)
  const y1 = Math.min(Math.max(y + h, y0), imageHeight)
  return [x0, y0, x1 - x0, y1 - y0]
}

export function drawBox(
  ctx: CanvasRenderingContext2D,
  rect: DisplayRect,
  color = '#ff3333',
): void {
  ctx.beginPath()
  ctx.rect(rect.left, rect.top, rect.width, rect.height)
  ctx.strokeStyle = color
  ctx.lineWidth = 2
  ctx.stroke()
}
