import { AnnotationApi, ConflictError } from './api'
import { dragToImageBox, drawBox, imageBoxToDisplay } from './canvasBox'
import type { ClassInfo, Placement, SceneTask } from './types'

/**
 * Single-scene annotation session: draw boxes on the displayed scene,
 * pick a class, submit, and accept/reject inpainted previews.
 *
 * Keyboard: 1–8 select a class, Enter submits the drawn boxes,
 * A accepts the preview, R rejects it.
 */
export class AnnotatorApp {
  task: SceneTask | null = null
  classes: ClassInfo[] = []
  selectedClass = 0
  pending: Placement[] = []
  scale = 1.0

  private drag: { startX: number; startY: number } | null = null
  private readonly keyHandler = (e: KeyboardEvent) => this.onKey(e)
  private canvas: HTMLCanvasElement
  private banner: HTMLElement
  private message: HTMLElement
  private classList: HTMLElement

  constructor(root: HTMLElement, private api: AnnotationApi) {
    this.canvas = document.createElement('canvas')
    this.canvas.id = 'scene-canvas'
    this.banner = document.createElement('div')
    this.banner.id = 'conflict-banner'
    this.banner.hidden = true
    this.message = document.createElement('div')
    this.message.id = 'validation-message'
    this.classList = document.createElement('div')
    this.classList.id = 'class-list'
    root.append(this.banner, this.classList, this.canvas, this.message)

    this.canvas.addEventListener('mousedown', (e) => this.onMouseDown(e))
    this.canvas.addEventListener('mouseup', (e) => this.onMouseUp(e))
    document.addEventListener('keydown', this.keyHandler)
  }

  /** Detach the document-level keyboard listener. */
  dispose(): void {
    document.removeEventListener('keydown', this.keyHandler)
  }

  async init(): Promise<void> {
    this.classes = await this.api.getClasses()
    this.renderClassList()
    await this.loadNext()
  }

  async loadNext(): Promise<void> {
    const page = await this.api.listTasks('pending')
    this.task = page.tasks[0] ?? null
    this.pending = []
    if (this.task) {
      this.canvas.width = Math.round(this.task.width * this.scale)
      this.canvas.height = Math.round(this.task.height * this.scale)
    }
    this.redraw()
  }

  async refresh(): Promise<void> {
    if (!this.task) return
    this.task = await this.api.getScene(this.task.scene_id)
    this.redraw()
  }

  selectClass(index: number): void {
    if (index >= 0 && index < this.classes.length) {
      this.selectedClass = index
      this.renderClassList()
    }
  }

  private canvasPoint(e: MouseEvent): { x: number; y: number } {
    const rect = this.canvas.getBoundingClientRect()
    return { x: e.clientX - rect.left, y: e.clientY - rect.top }
  }

  private onMouseDown(e: MouseEvent): void {
    const p = this.canvasPoint(e)
    this.drag = { startX: p.x, startY: p.y }
  }

  private onMouseUp(e: MouseEvent): void {
    if (!this.drag || !this.task || this.classes.length === 0) return
    const p = this.canvasPoint(e)
    const bbox = dragToImageBox(
      { ...this.drag, endX: p.x, endY: p.y },
      this.scale,
    )
    this.drag = null
    if (bbox === null) {
      this.message.textContent = 'Draw a box with non-zero area.'
      return
    }
    this.message.textContent = ''
    this.pending.push({ bbox, class_name: this.classes[this.selectedClass].name })
    this.redraw()
  }

  private onKey(e: KeyboardEvent): void {
    if (e.key >= '1' && e.key <= '8') {
      this.selectClass(Number(e.key) - 1)
    } else if (e.key === 'Enter') {
      void this.submit()
    } else if (e.key === 'a' || e.key === 'A') {
      void this.review('accept')
    } else if (e.key === 'r' || e.key === 'R') {
      void this.review('reject')
    }
  }

  async submit(): Promise<void> {
    if (!this.task) return
    if (this.pending.length === 0) {
      this.message.textContent = 'Nothing to submit: draw at least one box.'
      return
    }
    try {
      this.task = await this.api.submitPlacements(this.task.scene_id, this.pending)
      this.pending = []
      this.redraw()
    } catch (err) {
      if (err instanceof ConflictError) {
        await this.onConflict()
        return
      }
      throw err
    }
  }

  async review(verdict: 'accept' | 'reject'): Promise<void> {
    if (!this.task) return
    try {
      this.task = await this.api.review(this.task.scene_id, verdict)
      if (verdict === 'accept') {
        await this.loadNext()
      } else {
        // a rejection re-inpaints server-side; poll for the fresh preview
        await this.refresh()
      }
    } catch (err) {
      if (err instanceof ConflictError) {
        await this.onConflict()
        return
      }
      throw err
    }
  }

  private async onConflict(): Promise<void> {
    this.banner.hidden = false
    this.banner.textContent = 'Scene changed on the server; view refreshed.'
    await this.refresh()
  }

  private renderClassList(): void {
    this.classList.textContent = ''
    this.classes.forEach((cls, i) => {
      const item = document.createElement('span')
      item.textContent = `${i + 1}:${cls.name}`
      item.className = i === this.selectedClass ? 'class selected' : 'class'
      this.classList.append(item)
    })
  }

  redraw(): void {
    const ctx = this.canvas.getContext('2d')
    if (!ctx || !this.task) return
    ctx.clearRect(0, 0, this.canvas.width, this.canvas.height)
    for (const placed of this.task.annotations) {
      drawBox(ctx, imageBoxToDisplay(placed.bbox, this.scale), '#33aa33')
    }
    for (const drawn of this.pending) {
      drawBox(ctx, imageBoxToDisplay(drawn.bbox, this.scale))
    }
  }
}

export function mount(root: HTMLElement, baseUrl = '', token?: string): AnnotatorApp {
  const app = new AnnotatorApp(root, new AnnotationApi(baseUrl, token))
  void app.init()
  return app
}
