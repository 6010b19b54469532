/** Shared shapes mirroring the annotation service's JSON API. */

export interface ClassInfo {
  id: number
  name: string
}

/** COCO-style [x, y, width, height] in image pixels. */
export type Bbox = [number, number, number, number]

export interface Placement {
  bbox: Bbox
  class_name: string
  rationale?: string
}

export interface SceneTask {
  scene_id: string
  image_ref: string
  width: number
  height: number
  status: string
  annotations: Placement[]
  preview_ref: string | null
}

export interface TaskPage {
  tasks: SceneTask[]
  next_cursor: string | null
}

export type Verdict = 'accept' | 'reject'
