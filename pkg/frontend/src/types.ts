// Wire types for the four service endpoints. The source of truth is the
// checked-in JSON schema files under ../schema shared with the service.

export interface MetaResponse {
  M: number;
  K: number;
  d: number;
  tau: number;
  sigma0: number;
  concept_item_counts: number[];
}

export interface Neighbor {
  item: string;
  similarity: number;
}

export interface NeighborsResponse {
  item: string;
  concept: number;
  neighbors: Neighbor[];
}

export interface Component {
  k: number;
  confidence: number;
  mu: number[];
}

export interface ComponentsResponse {
  user: string;
  components: Component[];
}

export type Anchor = { item: string } | { user: string; k: number };

export interface ControlRequest {
  item?: string;
  user?: string;
  k?: number;
  dim: number;
  b?: number;
  gamma?: number;
  beam?: number;
  value?: number;
}

export interface ControlResponse {
  items: string[];
  dim_values: number[];
  boundaries: number[];
  objective: number;
  k_star: number;
  range: [number, number];
}

export interface ErrorBody {
  error: number;
  message: string;
}

export class ServiceError extends Error {
  constructor(public readonly code: number, message: string) {
    super(message);
  }
}
