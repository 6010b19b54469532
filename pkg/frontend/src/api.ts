import type { ClassInfo, Placement, SceneTask, TaskPage, Verdict } from './types'

/** The scene changed server-side (HTTP 409); refetch before retrying. */
export class ConflictError extends Error {}

export class ApiError extends Error {
  constructor(message: string, public status: number) {
    super(message)
  }
}

/** Thin typed client over the annotation service's JSON endpoints. */
export class AnnotationApi {
  constructor(private baseUrl = '', private token?: string) {}

  private headers(): Record<string, string> {
    const headers: Record<string, string> = { 'Content-Type': 'application/json' }
    if (this.token) headers['X-Auth-Token'] = this.token
    return headers
  }

  private async request<T>(method: string, path: string, body?: unknown): Promise<T> {
    const resp = await fetch(this.baseUrl + path, {
      method,
      headers: this.headers(),
      body: body === undefined ? undefined : JSON.stringify(body),
    })
    if (resp.status === 409) {
      throw new ConflictError(await resp.text())
    }
    if (!resp.ok) {
      throw new ApiError(await resp.text(), resp.status)
    }
    return resp.json() as Promise<T>
  }

  listTasks(status?: string, cursor?: string): Promise<TaskPage> {
    const params = new URLSearchParams()
    if (status) params.set('status', status)
    if (cursor) params.set('cursor', cursor)
    const query = params.toString()
    return this.request('GET', '/tasks' + (query ? `?${query}` : ''))
  }

  async getClasses(): Promise<ClassInfo[]> {
    const body = await this.request<{ classes: ClassInfo[] }>('GET', '/classes')
    return body.classes
  }

  getScene(sceneId: string): Promise<SceneTask> {
    return this.request('GET', `/scenes/${sceneId}`)
  }

  submitPlacements(sceneId: string, placements: Placement[]): Promise<SceneTask> {
    return this.request('POST', `/scenes/${sceneId}/placements`, { placements })
  }

  review(sceneId: string, verdict: Verdict): Promise<SceneTask> {
    return this.request('POST', `/scenes/${sceneId}/review`, { verdict })
  }

  imageUrl(sceneId: string): string {
    return `${this.baseUrl}/scenes/${sceneId}/image`
  }

  previewUrl(sceneId: string): string {
    return `${this.baseUrl}/scenes/${sceneId}/preview`
  }
}
