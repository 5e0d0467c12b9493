/**
 * Typed client for the inference service. Field names mirror the service
 * JSON exactly (snake_case); nothing here computes model math.
 */

export interface GenerateRequest {
  context: string[];
  personas: string[];
  n: number;
  seed?: number;
  sds_on?: boolean;
  fds_on?: boolean;
  max_len?: number;
}

export interface ResponseItem {
  tokens: string[];
  text: string;
  selected_persona: number | null;
  fds_used: boolean;
}

export interface GenerateResponse {
  responses: ResponseItem[];
  attention: number[][]; // hops x k, rows sum to 1
  type_trace: number[][]; // per candidate, per token: persona-word mixture weight
  z_norms: number[];
  seed: number;
}

export interface ModelInfo {
  vocab_size: number;
  vocab_hash: string;
  hidden: number;
  embed_dim: number;
  mem_dim: number;
  latent_dim: number;
  hops: number;
  enc_layers: number;
  k_max: number;
  max_len: number;
  n_parameters: number;
}

export class ServiceError extends Error {
  constructor(message: string, readonly status?: number) {
    super(message);
    this.name = 'ServiceError';
  }
}

async function request<T>(base: string, path: string, init?: RequestInit): Promise<T> {
  let res: Response;
  try {
    res = await fetch(`${base}${path}`, init);
  } catch (e) {
    throw new ServiceError(`service unreachable: ${e instanceof Error ? e.message : e}`);
  }
  if (!res.ok) {
    const body = await res.json().catch(() => ({}));
    const detail = typeof body.detail === 'string' ? body.detail : JSON.stringify(body.detail ?? body);
    throw new ServiceError(`HTTP ${res.status}: ${detail}`, res.status);
  }
  return res.json() as Promise<T>;
}

export class ApiClient {
  constructor(public base: string) {}

  health(): Promise<{ status: string }> {
    return request(this.base, '/api/health');
  }

  modelInfo(): Promise<ModelInfo> {
    return request(this.base, '/api/model');
  }

  generate(req: GenerateRequest): Promise<GenerateResponse> {
    return request(this.base, '/api/generate', {
      method: 'POST',
      headers: { 'Content-Type': 'application/json' },
      body: JSON.stringify(req),
    });
  }
}
